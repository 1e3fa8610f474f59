/**
 * Deterministic seeded classifier for protocol and pipeline testing.
 *
 * Fixed 32x32x3 input, 10 classes. Features are per-channel means over the
 * sixteen 8x8 blocks (48 dims, scaled to [0, 1]); logits are a frozen random
 * linear map drawn as 2u-1 from SplitMix64(seed) in row-major order, followed
 * by a max-subtracted softmax. Every image is scored independently, so batch
 * composition and order cannot affect a row.
 */

import type { BatchShape, ModelDescriptor, ServedModel } from './model.js';
import { ModelError } from './model.js';
import { SplitMix64 } from './rng.js';

const WIDTH = 32;
const HEIGHT = 32;
const CHANNELS = 3;
const CLASSES = 10;
const BLOCK = 8;
const FEATURES = (WIDTH / BLOCK) * (HEIGHT / BLOCK) * CHANNELS;

export class MockModel implements ServedModel {
  readonly descriptor: ModelDescriptor;
  private readonly weights: Float64Array;

  constructor(seed: number) {
    this.descriptor = {
      name: `mock@seed=${seed}`,
      width: WIDTH,
      height: HEIGHT,
      channels: CHANNELS,
      classes: CLASSES,
    };
    const rng = new SplitMix64(seed);
    this.weights = new Float64Array(CLASSES * FEATURES);
    for (let i = 0; i < this.weights.length; i++) {
      this.weights[i] = 2 * rng.nextF64() - 1;
    }
  }

  async predict(pixels: Float32Array, shape: BatchShape): Promise<number[][]> {
    if (
      shape.width !== WIDTH ||
      shape.height !== HEIGHT ||
      shape.channels !== CHANNELS
    ) {
      throw new ModelError(
        `mock model expects ${WIDTH}x${HEIGHT}x${CHANNELS} input, ` +
          `got ${shape.width}x${shape.height}x${shape.channels}`,
      );
    }
    const rows: number[][] = [];
    const imageLen = HEIGHT * WIDTH * CHANNELS;
    for (let b = 0; b < shape.batch; b++) {
      rows.push(this.scoreImage(pixels, b * imageLen));
    }
    return rows;
  }

  private scoreImage(pixels: Float32Array, offset: number): number[] {
    const features = new Float64Array(FEATURES);
    const blocksPerRow = WIDTH / BLOCK;
    for (let y = 0; y < HEIGHT; y++) {
      const blockY = Math.floor(y / BLOCK);
      for (let x = 0; x < WIDTH; x++) {
        const blockX = Math.floor(x / BLOCK);
        const base = offset + (y * WIDTH + x) * CHANNELS;
        const featBase = (blockY * blocksPerRow + blockX) * CHANNELS;
        for (let c = 0; c < CHANNELS; c++) {
          features[featBase + c] += pixels[base + c];
        }
      }
    }
    const scale = 1 / (BLOCK * BLOCK * 255);
    for (let i = 0; i < FEATURES; i++) {
      features[i] *= scale;
    }
    const logits = new Float64Array(CLASSES);
    let maxLogit = -Infinity;
    for (let k = 0; k < CLASSES; k++) {
      let acc = 0;
      const row = k * FEATURES;
      for (let i = 0; i < FEATURES; i++) {
        acc += this.weights[row + i] * features[i];
      }
      logits[k] = acc;
      if (acc > maxLogit) maxLogit = acc;
    }
    let total = 0;
    const probs = new Array<number>(CLASSES);
    for (let k = 0; k < CLASSES; k++) {
      const e = Math.exp(logits[k] - maxLogit);
      probs[k] = e;
      total += e;
    }
    for (let k = 0; k < CLASSES; k++) {
      probs[k] /= total;
    }
    return probs;
  }

  close(): void {}
}
