/**
 * Line-delimited JSON wire protocol shared with the gaborsense client.
 *
 * Requests arrive one JSON object per line:
 *   {"op": "meta"}
 *   {"op": "predict", "id", "batch", "width", "height", "channels", "data"}
 * where `data` is base64 of little-endian float32 pixels in batch-major,
 * channel-fastest order (NHWC, C layout). Replies use the same framing:
 *   {"op": "meta", "name", "width", "height", "channels", "classes"}
 *   {"op": "predict", "id", "probs": [[...], ...]}
 *   {"op": "error", "id", "message"}
 */

import { endianness } from 'node:os';

export interface MetaRequest {
  op: 'meta';
}

export interface PredictRequest {
  op: 'predict';
  id: number;
  batch: number;
  width: number;
  height: number;
  channels: number;
  data: string;
}

export type Request = MetaRequest | PredictRequest;

export interface MetaReply {
  op: 'meta';
  name: string;
  width: number;
  height: number;
  channels: number;
  classes: number;
}

export interface PredictReply {
  op: 'predict';
  id: number;
  probs: number[][];
}

export interface ErrorReply {
  op: 'error';
  id: number | null;
  message: string;
}

/** Malformed frame. Carries the request id when one could be recovered. */
export class ProtocolError extends Error {
  readonly id: number | null;

  constructor(message: string, id: number | null = null) {
    super(message);
    this.name = 'ProtocolError';
    this.id = id;
  }
}

function isPlainObject(value: unknown): value is Record<string, unknown> {
  return typeof value === 'object' && value !== null && !Array.isArray(value);
}

function requireInt(
  frame: Record<string, unknown>,
  field: string,
  min: number,
  id: number | null,
): number {
  const value = frame[field];
  if (typeof value !== 'number' || !Number.isInteger(value) || value < min) {
    throw new ProtocolError(
      `field "${field}" must be an integer >= ${min}, got ${JSON.stringify(value)}`,
      id,
    );
  }
  return value;
}

/** Parse one request line, validating field presence and types. */
export function parseRequest(line: string): Request {
  let frame: unknown;
  try {
    frame = JSON.parse(line);
  } catch (err) {
    throw new ProtocolError(`malformed JSON frame: ${(err as Error).message}`);
  }
  if (!isPlainObject(frame)) {
    throw new ProtocolError('frame is not a JSON object');
  }
  const op = frame['op'];
  if (op === 'meta') {
    return { op: 'meta' };
  }
  // Recover the id early so later failures can still be routed back.
  const rawId = frame['id'];
  const id = typeof rawId === 'number' && Number.isInteger(rawId) ? rawId : null;
  if (op !== 'predict') {
    throw new ProtocolError(`unsupported op ${JSON.stringify(op)}`, id);
  }
  if (id === null) {
    throw new ProtocolError('predict frame is missing an integer "id"');
  }
  const batch = requireInt(frame, 'batch', 1, id);
  const width = requireInt(frame, 'width', 1, id);
  const height = requireInt(frame, 'height', 1, id);
  const channels = requireInt(frame, 'channels', 1, id);
  const data = frame['data'];
  if (typeof data !== 'string') {
    throw new ProtocolError('field "data" must be a base64 string', id);
  }
  return { op: 'predict', id, batch, width, height, channels, data };
}

const BASE64_SHAPE = /^[A-Za-z0-9+/]*={0,2}$/;

/**
 * Decode a predict payload into float32 pixels.
 *
 * Node's base64 decoder skips invalid characters silently, so the string is
 * shape-checked first; the byte count must match the declared geometry.
 */
export function decodeBatch(req: PredictRequest): Float32Array {
  if (req.data.length % 4 !== 0 || !BASE64_SHAPE.test(req.data)) {
    throw new ProtocolError('field "data" is not valid base64', req.id);
  }
  const raw = Buffer.from(req.data, 'base64');
  const expected = req.batch * req.height * req.width * req.channels * 4;
  if (raw.byteLength !== expected) {
    throw new ProtocolError(
      `payload is ${raw.byteLength} bytes, expected ${expected}`,
      req.id,
    );
  }
  if (endianness() === 'LE') {
    // Typed-array views use platform byte order; on LE hosts this is a copy-free reinterpret.
    return new Float32Array(raw.buffer, raw.byteOffset, expected / 4);
  }
  const out = new Float32Array(expected / 4);
  const view = new DataView(raw.buffer, raw.byteOffset, expected);
  for (let i = 0; i < out.length; i++) {
    out[i] = view.getFloat32(i * 4, true);
  }
  return out;
}

/** Encode a float32 batch the way the client does (for tests and tooling). */
export function encodeBatch(pixels: Float32Array): string {
  if (endianness() === 'LE') {
    return Buffer.from(pixels.buffer, pixels.byteOffset, pixels.byteLength).toString('base64');
  }
  const buf = Buffer.allocUnsafe(pixels.length * 4);
  for (let i = 0; i < pixels.length; i++) {
    buf.writeFloatLE(pixels[i], i * 4);
  }
  return buf.toString('base64');
}
