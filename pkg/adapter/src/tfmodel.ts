/**
 * TensorFlow.js-backed served model.
 *
 * Loads layers-model or graph-model artifacts (model.json plus weight shards)
 * from local disk and serves them on the CPU backend, which is deterministic
 * for a fixed graph. Preprocessing is owned here: raw [0, 255] wire pixels are
 * resized or center-cropped to the model's true input geometry and normalized
 * per the preprocessing spec. Models that emit logits rather than
 * probabilities are detected at load time with a zero-input probe and wrapped
 * in a softmax, recorded in the descriptor name.
 */

import { readFileSync } from 'node:fs';
import { basename, dirname, join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

import type { BatchShape, ModelDescriptor, PreprocessSpec, ServedModel } from './model.js';
import { ModelError, ModelLoadError } from './model.js';

interface WeightsManifestGroup {
  paths: string[];
  weights: tf.io.WeightsManifestEntry[];
}

function readArtifacts(modelJsonPath: string): tf.io.ModelArtifacts {
  let parsed: Record<string, unknown>;
  try {
    parsed = JSON.parse(readFileSync(modelJsonPath, 'utf-8'));
  } catch (err) {
    throw new ModelLoadError(`cannot read ${modelJsonPath}: ${(err as Error).message}`);
  }
  const manifest = parsed['weightsManifest'] as WeightsManifestGroup[] | undefined;
  if (!parsed['modelTopology'] || !Array.isArray(manifest)) {
    throw new ModelLoadError(
      `${modelJsonPath} is not a tfjs model.json (missing modelTopology/weightsManifest)`,
    );
  }
  const dir = dirname(modelJsonPath);
  const shards: Buffer[] = [];
  const weightSpecs: tf.io.WeightsManifestEntry[] = [];
  for (const group of manifest) {
    weightSpecs.push(...group.weights);
    for (const path of group.paths) {
      try {
        shards.push(readFileSync(join(dir, path)));
      } catch (err) {
        throw new ModelLoadError(`cannot read weight shard ${path}: ${(err as Error).message}`);
      }
    }
  }
  const blob = Buffer.concat(shards);
  const weightData = blob.buffer.slice(blob.byteOffset, blob.byteOffset + blob.byteLength);
  return {
    modelTopology: parsed['modelTopology'] as object,
    format: parsed['format'] as string | undefined,
    weightSpecs,
    weightData,
  };
}

type AnyModel = tf.LayersModel | tf.GraphModel;

function inputGeometry(model: AnyModel, source: string): [number, number, number] {
  const shape = model.inputs[0]?.shape;
  if (!shape || shape.length !== 4) {
    throw new ModelLoadError(
      `${source}: expected a single NHWC image input, got shape ${JSON.stringify(shape)}`,
    );
  }
  const [, height, width, channels] = shape;
  if (!height || !width || !channels || height < 1 || width < 1 || channels < 1) {
    throw new ModelLoadError(`${source}: input shape ${JSON.stringify(shape)} is not concrete`);
  }
  return [height, width, channels];
}

class TfjsModel implements ServedModel {
  readonly descriptor: ModelDescriptor;

  constructor(
    private readonly model: AnyModel,
    private readonly prep: PreprocessSpec,
    private readonly applySoftmax: boolean,
    descriptor: ModelDescriptor,
  ) {
    this.descriptor = descriptor;
    this.prep = prep;
  }

  private run(x: tf.Tensor4D): tf.Tensor {
    const raw = this.model.predict(x, { batchSize: x.shape[0] });
    const out = Array.isArray(raw) ? raw[0] : (raw as tf.Tensor);
    return this.applySoftmax ? tf.softmax(out) : out;
  }

  async predict(pixels: Float32Array, shape: BatchShape): Promise<number[][]> {
    if (shape.channels !== this.descriptor.channels) {
      throw new ModelError(
        `model expects ${this.descriptor.channels} channels, got ${shape.channels}`,
      );
    }
    const { height, width } = this.descriptor;
    const out = tf.tidy(() => {
      let x: tf.Tensor4D = tf.tensor4d(pixels, [
        shape.batch,
        shape.height,
        shape.width,
        shape.channels,
      ]);
      if (shape.height !== height || shape.width !== width) {
        if (this.prep.resize === 'center-crop') {
          const side = Math.min(shape.height, shape.width);
          const top = Math.floor((shape.height - side) / 2);
          const left = Math.floor((shape.width - side) / 2);
          x = x.slice([0, top, left, 0], [shape.batch, side, side, shape.channels]);
        }
        x = tf.image.resizeBilinear(x, [height, width]);
      }
      if (this.prep.normalize === 'unit') {
        x = x.div(255.0);
      } else if (this.prep.normalize === 'center') {
        x = x.div(127.5).sub(1.0);
      }
      return this.run(x);
    });
    try {
      const flat = await out.data();
      const classes = this.descriptor.classes;
      const rows: number[][] = [];
      for (let b = 0; b < shape.batch; b++) {
        rows.push(Array.from(flat.subarray(b * classes, (b + 1) * classes)));
      }
      return rows;
    } finally {
      out.dispose();
    }
  }

  close(): void {
    this.model.dispose();
  }
}

export async function loadTfjsModel(
  modelJsonPath: string,
  prep: PreprocessSpec,
): Promise<ServedModel> {
  await tf.setBackend('cpu');
  await tf.ready();
  const artifacts = readArtifacts(modelJsonPath);
  const handler = tf.io.fromMemory(artifacts);
  let model: AnyModel;
  try {
    model =
      artifacts.format === 'graph-model'
        ? await tf.loadGraphModel(handler)
        : await tf.loadLayersModel(handler);
  } catch (err) {
    throw new ModelLoadError(`cannot load ${modelJsonPath}: ${(err as Error).message}`);
  }
  const source = `${basename(dirname(modelJsonPath))}/${basename(modelJsonPath)}`;
  const [height, width, channels] = inputGeometry(model, source);

  // Zero-input probe: learn the class count and whether outputs are already
  // normalized. Logit-emitting models get a softmax wrapper, noted in name.
  const probe = tf.tidy(() => {
    const raw = model.predict(tf.zeros([1, height, width, channels]), { batchSize: 1 });
    return Array.isArray(raw) ? raw[0] : (raw as tf.Tensor);
  });
  let classes: number;
  let applySoftmax: boolean;
  try {
    const probeShape = probe.shape;
    if (probeShape.length !== 2 || !probeShape[1]) {
      throw new ModelLoadError(
        `${source}: expected [batch, classes] output, got ${JSON.stringify(probeShape)}`,
      );
    }
    classes = probeShape[1];
    const row = await probe.data();
    let total = 0;
    for (let i = 0; i < classes; i++) total += row[i];
    applySoftmax = Math.abs(total - 1.0) > 1e-3;
  } finally {
    probe.dispose();
  }

  const name = `tfjs:${source}#norm=${prep.normalize}${applySoftmax ? '+softmax' : ''}`;
  return new TfjsModel(model, prep, applySoftmax, {
    name,
    width,
    height,
    channels,
    classes,
  });
}
