// Browser UI: pose sliders grouped by joint, light steering (drag pad +
// mode buttons + envmap picker), camera orbit on the canvas, and a latency
// HUD. All rendering happens server-side; this page only steers and blits.

import { Manifest, frameToImageData } from "./protocol.js";
import { LiveSession, dragToLight } from "./session.js";

const PAPER_REFERENCE_MS = 21; // V100 single-hand figure, shown as context only

function el<K extends keyof HTMLElementTagNameMap>(tag: K, cls?: string,
                                                   parent?: HTMLElement) {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  parent?.appendChild(node);
  return node;
}

async function boot() {
  const banner = document.getElementById("banner") as HTMLDivElement;
  const canvas = document.getElementById("view") as HTMLCanvasElement;
  const hud = document.getElementById("hud") as HTMLDivElement;
  const sliders = document.getElementById("sliders") as HTMLDivElement;
  const lightPanel = document.getElementById("light") as HTMLDivElement;

  let manifest: Manifest;
  try {
    manifest = await (await fetch("/manifest")).json();
  } catch {
    banner.textContent = "cannot reach the render service; is `primlight serve` running?";
    banner.classList.add("error");
    return;
  }

  const theta = new Array(manifest.pose_dim).fill(0);
  const session = new LiveSession({
    url: `ws://${location.host}/ws`,
    onFrame: (frame, latencyMs) => {
      canvas.width = frame.width;
      canvas.height = frame.height;
      const ctx = canvas.getContext("2d")!;
      ctx.putImageData(new ImageData(frameToImageData(frame), frame.width, frame.height), 0, 0);
      hud.textContent = `frame #${frame.requestId}  round-trip ${latencyMs.toFixed(0)} ms`
        + `  (paper V100 reference: ${PAPER_REFERENCE_MS} ms, context only)`;
      session.requestStats();
    },
    onStats: (stats) => {
      if ("render_ms" in stats && stats.render_ms != null) {
        const stages = Object.entries(stats.stage_ms)
          .map(([k, v]) => `${k} ${v.toFixed(1)}`).join("  ");
        hud.title = `server render ${stats.render_ms.toFixed(1)} ms | ${stages}`;
      }
    },
    onStatus: (status) => {
      banner.textContent = status === "connected" ? "" : `service ${status}...`;
      banner.classList.toggle("error", status !== "connected");
    },
    onServerError: (message) => {
      banner.textContent = `server: ${message}`;
      banner.classList.add("error");
      setTimeout(() => banner.classList.remove("error"), 2500);
    },
  });

  // pose sliders, grouped by joint
  for (const group of manifest.theta_groups) {
    const box = el("fieldset", "joint", sliders);
    el("legend", undefined, box).textContent = group.name;
    group.indices.forEach((idx, k) => {
      const row = el("label", "dof", box);
      row.textContent = group.axes[k];
      const s = el("input", undefined, row) as HTMLInputElement;
      s.type = "range";
      s.min = String(manifest.theta_lo[idx]);
      s.max = String(manifest.theta_hi[idx]);
      s.step = "0.01";
      s.value = "0";
      s.addEventListener("input", () => {
        theta[idx] = parseFloat(s.value);
        session.setPose(theta);
      });
    });
  }
  const reset = el("button", undefined, sliders);
  reset.textContent = "rest pose";
  reset.addEventListener("click", () => {
    theta.fill(0);
    sliders.querySelectorAll("input").forEach((s) => ((s as HTMLInputElement).value = "0"));
    session.setPose(theta);
  });

  // light controls
  let lightMode: "dir" | "point" | "envmap" = "dir";
  const modeRow = el("div", "modes", lightPanel);
  for (const mode of ["dir", "point", "envmap"] as const) {
    if (!manifest.modes.includes(mode)) continue;
    const b = el("button", undefined, modeRow);
    b.textContent = mode;
    b.addEventListener("click", () => {
      lightMode = mode;
      if (mode === "envmap") {
        session.setLight("envmap", envPicker.value ? envPicker.value : { seed: 0 });
      } else {
        session.setLight(mode, dragToLight(padX, padY, mode));
      }
    });
  }
  const envPicker = el("select", undefined, lightPanel) as HTMLSelectElement;
  const synth = el("option", undefined, envPicker) as HTMLOptionElement;
  synth.value = "";
  synth.textContent = "synthetic envmap (seed 0)";
  for (const name of manifest.envmaps) {
    const opt = el("option", undefined, envPicker) as HTMLOptionElement;
    opt.value = name;
    opt.textContent = name;
  }
  envPicker.addEventListener("change", () => {
    lightMode = "envmap";
    session.setLight("envmap", envPicker.value ? envPicker.value : { seed: 0 });
  });

  // drag pad: screen-space drag -> light direction / near-field position
  const pad = el("div", "pad", lightPanel);
  pad.textContent = "drag light";
  let padX = 0.3, padY = -0.5;
  let dragging = false;
  const moveLight = (ev: PointerEvent) => {
    const rect = pad.getBoundingClientRect();
    padX = ((ev.clientX - rect.left) / rect.width) * 2 - 1;
    padY = ((ev.clientY - rect.top) / rect.height) * 2 - 1;
    if (lightMode !== "envmap") session.setLight(lightMode, dragToLight(padX, padY, lightMode));
  };
  pad.addEventListener("pointerdown", (ev) => { dragging = true; moveLight(ev); });
  pad.addEventListener("pointermove", (ev) => dragging && moveLight(ev));
  window.addEventListener("pointerup", () => (dragging = false));

  // camera orbit on the canvas
  let orbiting = false;
  let last = [0, 0];
  canvas.addEventListener("pointerdown", (ev) => { orbiting = true; last = [ev.clientX, ev.clientY]; });
  window.addEventListener("pointermove", (ev) => {
    if (!orbiting) return;
    const dx = (ev.clientX - last[0]) * 0.01;
    const dy = (ev.clientY - last[1]) * 0.01;
    last = [ev.clientX, ev.clientY];
    session.setOrbit({
      azimuth: session.orbit.azimuth - dx,
      elevation: Math.max(-1.4, Math.min(1.4, session.orbit.elevation + dy)),
    });
  });
  window.addEventListener("pointerup", () => (orbiting = false));
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    session.setOrbit({ distance: Math.max(0.15, session.orbit.distance * (ev.deltaY > 0 ? 1.1 : 0.9)) });
  });

  session.connect();
}

boot();
