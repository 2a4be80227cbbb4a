// Live render session: owns the socket, the scene state the user steers,
// and the pull-based frame loop. One frame request is in flight at a time;
// control changes made meanwhile coalesce (latest state wins) and trigger
// a fresh request as soon as the previous frame lands. Frames whose request
// id is not the newest are dropped, so nothing renders out of order.

import { ClientMsg, Frame, LightMode, ServerJson, decodeFrame, encode } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
  onerror: ((e: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface SessionOptions {
  url: string;
  socketFactory?: SocketFactory;
  onFrame?: (frame: Frame, latencyMs: number) => void;
  onStatus?: (status: "connecting" | "connected" | "disconnected") => void;
  onServerError?: (message: string) => void;
  onStats?: (stats: ServerJson) => void;
  reconnect?: boolean;
  now?: () => number;
}

export interface OrbitState {
  azimuth: number;
  elevation: number;
  distance: number;
  fov_deg: number;
}

export class LiveSession {
  theta: number[] = [];
  orbit: OrbitState = { azimuth: 0.6, elevation: 0.45, distance: 0.38, fov_deg: 32 };
  light: { mode: LightMode; value: unknown } = { mode: "dir", value: [0.3, 1.0, 0.3] };
  latencies: number[] = [];
  lastShownId = 0;

  private opts: SessionOptions;
  private sock: SocketLike | null = null;
  private open = false;
  private closed = false;
  private dirty = { pose: false, camera: false, light: false };
  private nextId = 1;
  private inFlightId: number | null = null;
  private framePending = false;
  private sentAt = new Map<number, number>();
  private backoffMs = 500;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(opts: SessionOptions) {
    this.opts = opts;
  }

  connect(): void {
    const factory = this.opts.socketFactory
      ?? ((url: string) => new WebSocket(url) as unknown as SocketLike);
    this.opts.onStatus?.("connecting");
    let sock: SocketLike;
    try {
      sock = factory(this.opts.url);
    } catch (e) {
      this.handleDisconnect();
      return;
    }
    this.sock = sock;
    if (this.sock && "binaryType" in (this.sock as object)) {
      (this.sock as unknown as { binaryType: string }).binaryType = "arraybuffer";
    }
    sock.onopen = () => {
      this.open = true;
      this.backoffMs = 500;
      this.opts.onStatus?.("connected");
      // resend the full scene state so a reconnect preserves the controls
      this.dirty = { pose: this.theta.length > 0, camera: true, light: true };
      this.inFlightId = null;
      this.requestFrame();
    };
    sock.onclose = () => this.handleDisconnect();
    sock.onerror = () => { /* onclose follows */ };
    sock.onmessage = (ev) => this.handleMessage(ev.data);
  }

  close(): void {
    this.closed = true;
    if (this.reconnectTimer) clearTimeout(this.reconnectTimer);
    this.sock?.close();
  }

  get connected(): boolean {
    return this.open;
  }

  get lastLatencyMs(): number | null {
    return this.latencies.length ? this.latencies[this.latencies.length - 1] : null;
  }

  setPose(theta: number[]): void {
    this.theta = theta.slice();
    this.dirty.pose = true;
    this.requestFrame();
  }

  setOrbit(partial: Partial<OrbitState>): void {
    Object.assign(this.orbit, partial);
    this.dirty.camera = true;
    this.requestFrame();
  }

  setLight(mode: LightMode, value: unknown): void {
    this.light = { mode, value };
    this.dirty.light = true;
    this.requestFrame();
  }

  requestStats(): void {
    if (this.open) this.send({ op: "stats" });
  }

  // Pull-based frame loop: never more than one request outstanding.
  requestFrame(): void {
    if (!this.open) return;
    if (this.inFlightId !== null) {
      this.framePending = true;
      return;
    }
    this.flushState();
    const id = this.nextId++;
    this.inFlightId = id;
    this.sentAt.set(id, (this.opts.now ?? Date.now)());
    this.send({ op: "frame", id });
  }

  private flushState(): void {
    if (this.dirty.pose && this.theta.length) {
      this.send({ op: "set_pose", theta: this.theta });
      this.dirty.pose = false;
    }
    if (this.dirty.camera) {
      this.send({ op: "set_camera", ...this.orbit });
      this.dirty.camera = false;
    }
    if (this.dirty.light) {
      this.send({ op: "set_light", mode: this.light.mode, value: this.light.value });
      this.dirty.light = false;
    }
  }

  private send(msg: ClientMsg): void {
    this.sock?.send(encode(msg));
  }

  private handleMessage(data: unknown): void {
    if (typeof data === "string") {
      let doc: ServerJson;
      try {
        doc = JSON.parse(data) as ServerJson;
      } catch {
        return;
      }
      if ("error" in doc) {
        // state unchanged server-side; report and keep going
        this.opts.onServerError?.(doc.error);
        if (this.inFlightId !== null) {
          this.inFlightId = null;
          if (this.framePending) {
            this.framePending = false;
            this.requestFrame();
          }
        }
      } else if ("render_ms" in doc) {
        this.opts.onStats?.(doc);
      }
      return;
    }
    const frame = decodeFrame(data as ArrayBuffer);
    const sent = this.sentAt.get(frame.requestId);
    this.sentAt.delete(frame.requestId);
    if (frame.requestId === this.inFlightId) this.inFlightId = null;
    // monotonicity: never display a frame older than the newest shown
    if (frame.requestId <= this.lastShownId) return;
    this.lastShownId = frame.requestId;
    const latency = sent !== undefined ? (this.opts.now ?? Date.now)() - sent : 0;
    this.latencies.push(latency);
    if (this.latencies.length > 120) this.latencies.shift();
    this.opts.onFrame?.(frame, latency);
    if (this.framePending) {
      this.framePending = false;
      this.requestFrame();
    }
  }

  private handleDisconnect(): void {
    const wasOpen = this.open;
    this.open = false;
    this.inFlightId = null;
    if (wasOpen || !this.closed) this.opts.onStatus?.("disconnected");
    if (this.closed || this.opts.reconnect === false) return;
    this.reconnectTimer = setTimeout(() => this.connect(), this.backoffMs);
    this.backoffMs = Math.min(this.backoffMs * 2, 8000);
  }
}

// Screen-space drag on the light pad -> steering parameters.
// Directional mode: a point on the view sphere; near-field (point) mode:
// the same direction scaled by a depth parameter.
export function dragToLight(x: number, y: number, mode: "dir" | "point",
                            depth = 0.35): number[] {
  const cx = Math.max(-1, Math.min(1, x));
  const cy = Math.max(-1, Math.min(1, y));
  const r2 = cx * cx + cy * cy;
  const z = Math.sqrt(Math.max(0, 1 - r2));
  const dir = [cx, -cy, z]; // pad up = world +y
  const n = Math.hypot(dir[0], dir[1], dir[2]) || 1;
  const unit = dir.map((v) => v / n);
  return mode === "dir" ? unit : unit.map((v) => v * depth);
}
