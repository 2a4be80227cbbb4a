// Wire protocol of the primlight render service: JSON control messages in,
// JSON replies or binary frames out. A binary frame is a 16-byte header of
// little-endian u32 (width, height, format tag, request id) followed by
// 8-bit sRGB rows.

export const FRAME_FORMAT_RGB8 = 1;

export type LightMode = "point" | "dir" | "envmap" | "olat";

export type ClientMsg =
  | { op: "set_pose"; theta: number[] }
  | { op: "set_camera"; azimuth?: number; elevation?: number; distance?: number;
      fov_deg?: number; width?: number; height?: number; target?: number[] }
  | { op: "set_light"; mode: LightMode; value: unknown }
  | { op: "frame"; id: number }
  | { op: "stats" };

export type ServerJson =
  | { ok: string }
  | { error: string }
  | { render_ms: number | null; stage_ms: Record<string, number> };

export interface Frame {
  width: number;
  height: number;
  requestId: number;
  pixels: Uint8Array; // RGB8, row-major from the top
}

export interface Manifest {
  pose_dim: number;
  theta_lo: number[];
  theta_hi: number[];
  theta_groups: { name: string; indices: number[]; axes: string[] }[];
  modes: LightMode[];
  envmaps: string[];
  image_size: [number, number];
}

export function encode(msg: ClientMsg): string {
  return JSON.stringify(msg);
}

export function decodeFrame(buf: ArrayBuffer): Frame {
  if (buf.byteLength < 16) throw new Error(`frame too short: ${buf.byteLength} bytes`);
  const head = new DataView(buf, 0, 16);
  const width = head.getUint32(0, true);
  const height = head.getUint32(4, true);
  const format = head.getUint32(8, true);
  const requestId = head.getUint32(12, true);
  if (format !== FRAME_FORMAT_RGB8) throw new Error(`unknown frame format ${format}`);
  const pixels = new Uint8Array(buf, 16);
  if (pixels.length !== width * height * 3) {
    throw new Error(`frame body ${pixels.length} != ${width}x${height}x3`);
  }
  return { width, height, requestId, pixels };
}

export function frameToImageData(frame: Frame): Uint8ClampedArray<ArrayBuffer> {
  // RGB8 -> RGBA for canvas putImageData
  const out = new Uint8ClampedArray(new ArrayBuffer(frame.width * frame.height * 4));
  for (let i = 0, j = 0; i < frame.pixels.length; i += 3, j += 4) {
    out[j] = frame.pixels[i];
    out[j + 1] = frame.pixels[i + 1];
    out[j + 2] = frame.pixels[i + 2];
    out[j + 3] = 255;
  }
  return out;
}
