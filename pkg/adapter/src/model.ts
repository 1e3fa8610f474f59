/**
 * Served-model abstraction and the --model spec dispatcher.
 *
 * Two model families are supported:
 *   mock[:seed]            deterministic seeded toy classifier, no runtime deps
 *   tfjs:/path/model.json  TensorFlow.js layers- or graph-model artifacts on disk
 *
 * Every model receives raw [0, 255] pixels off the wire and owns whatever
 * resizing and normalization its weights expect; the advertised descriptor
 * always reflects the true input geometry and class count.
 */

export interface ModelDescriptor {
  name: string;
  width: number;
  height: number;
  channels: number;
  classes: number;
}

export interface BatchShape {
  batch: number;
  width: number;
  height: number;
  channels: number;
}

export interface ServedModel {
  readonly descriptor: ModelDescriptor;
  /** Pixels are batch-major channel-fastest float32, raw [0, 255] scale. */
  predict(pixels: Float32Array, shape: BatchShape): Promise<number[][]>;
  close(): void;
}

/** How raw wire pixels are mapped into the model's expected input. */
export interface PreprocessSpec {
  /** Geometry policy when the request size differs from the model input. */
  resize: 'stretch' | 'center-crop';
  /** unit: x/255, center: x/127.5 - 1, raw: pass through untouched. */
  normalize: 'unit' | 'center' | 'raw';
}

/** The model could not be constructed; the process should exit nonzero. */
export class ModelLoadError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'ModelLoadError';
  }
}

/** A well-formed request this model cannot serve (wrong shape, etc.). */
export class ModelError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'ModelError';
  }
}

export async function loadModel(spec: string, prep: PreprocessSpec): Promise<ServedModel> {
  if (spec === 'mock' || spec.startsWith('mock:')) {
    const tail = spec === 'mock' ? '0' : spec.slice('mock:'.length);
    if (!/^\d+$/.test(tail)) {
      throw new ModelLoadError(`mock seed must be a non-negative integer, got "${tail}"`);
    }
    const { MockModel } = await import('./mock.js');
    return new MockModel(Number(tail));
  }
  if (spec.startsWith('tfjs:')) {
    // Imported lazily: tfjs startup is slow and mock-only runs skip it entirely.
    const { loadTfjsModel } = await import('./tfmodel.js');
    return loadTfjsModel(spec.slice('tfjs:'.length), prep);
  }
  throw new ModelLoadError(
    `unknown model spec "${spec}" (expected mock[:seed] or tfjs:/path/to/model.json)`,
  );
}
