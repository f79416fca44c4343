// Wire protocol shared with the render service: JSON control frames and
// binary payload frames with a 16-byte header
// (magic "VCAP", u32 id LE, u32 payload length LE, u16 format code, u16 reserved).

export const FORMAT_JPEG = 1;
export const FORMAT_PNG = 2;

export interface OrbitParams {
  azimuth: number; // degrees
  elevation: number; // degrees, clamped to +-89
  radius: number;
  target: [number, number, number];
  fov: number; // degrees
}

export interface RenderRequest {
  type: 'render';
  id: number;
  camera: OrbitParams;
  time: number;
  width: number;
  height: number;
  quality: number;
}

export interface RenderedMsg {
  type: 'rendered';
  id: number;
  status: 'ok';
  timing: { queue_ms: number; render_ms: number; encode_ms: number };
}

export interface SupersededMsg {
  type: 'superseded';
  id: number;
}

export interface ErrorMsg {
  type: 'error';
  id: number | null;
  reason: string;
}

export interface InfoMsg {
  type: 'info';
  n_frame: number;
  n_view: number;
  width: number;
  height: number;
  bounds: [number[], number[]];
  [key: string]: unknown;
}

export type ServerMsg = RenderedMsg | SupersededMsg | ErrorMsg | InfoMsg;

export interface BinaryFrame {
  id: number;
  format: number;
  payload: Uint8Array;
}

const MAGIC = [0x56, 0x43, 0x41, 0x50]; // "VCAP"

export function encodeControl(msg: object): string {
  return JSON.stringify(msg);
}

export function decodeControl(data: string): ServerMsg {
  const msg = JSON.parse(data);
  if (typeof msg !== 'object' || msg === null || typeof msg.type !== 'string') {
    throw new Error('control frame must be an object with a type field');
  }
  return msg as ServerMsg;
}

export function decodeBinaryFrame(buffer: ArrayBuffer): BinaryFrame {
  const view = new DataView(buffer);
  if (buffer.byteLength < 16 || MAGIC.some((b, i) => view.getUint8(i) !== b)) {
    throw new Error('bad binary frame header');
  }
  const id = view.getUint32(4, true);
  const length = view.getUint32(8, true);
  const format = view.getUint16(12, true);
  if (buffer.byteLength < 16 + length) {
    throw new Error(`binary frame truncated: expected ${length} payload bytes`);
  }
  return { id, format, payload: new Uint8Array(buffer, 16, length) };
}

export function encodeBinaryFrame(frame: BinaryFrame): ArrayBuffer {
  const out = new ArrayBuffer(16 + frame.payload.byteLength);
  const view = new DataView(out);
  MAGIC.forEach((b, i) => view.setUint8(i, b));
  view.setUint32(4, frame.id, true);
  view.setUint32(8, frame.payload.byteLength, true);
  view.setUint16(12, frame.format, true);
  view.setUint16(14, 0, true);
  new Uint8Array(out, 16).set(frame.payload);
  return out;
}
