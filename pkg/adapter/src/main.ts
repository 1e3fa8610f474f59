/**
 * CLI entry point.
 *
 *   gaborsense-adapter --model mock:7 --stdio
 *   gaborsense-adapter --model tfjs:/models/squeeze/model.json --port 9000
 *
 * Exit codes: 0 clean shutdown (stdio EOF), 1 model-load failure, 2 usage.
 */

import { parseArgs } from 'node:util';

import type { PreprocessSpec } from './model.js';
import { loadModel, ModelLoadError } from './model.js';
import { AdapterServer, runStdio, runTcp } from './server.js';

const USAGE = `usage: gaborsense-adapter --model SPEC (--stdio | --port N) [options]

options:
  --model SPEC        mock[:seed] or tfjs:/path/to/model.json  (default: mock)
  --stdio             serve one connection over stdin/stdout
  --port N            listen for TCP connections on 127.0.0.1:N
  --batch-limit N     reject predict batches larger than N      (default: 64)
  --norm MODE         unit (x/255), center (x/127.5-1), or raw  (default: unit)
  --crop MODE         stretch or center-crop when resizing      (default: stretch)
  --help              show this message
`;

function usageError(message: string): never {
  process.stderr.write(`gaborsense-adapter: ${message}\n\n${USAGE}`);
  process.exit(2);
}

function parsePositiveInt(value: string, flag: string): number {
  if (!/^\d+$/.test(value) || Number(value) < 1) {
    usageError(`${flag} must be a positive integer, got "${value}"`);
  }
  return Number(value);
}

async function main(): Promise<void> {
  let args;
  try {
    args = parseArgs({
      options: {
        model: { type: 'string', default: 'mock' },
        stdio: { type: 'boolean', default: false },
        port: { type: 'string' },
        'batch-limit': { type: 'string', default: '64' },
        norm: { type: 'string', default: 'unit' },
        crop: { type: 'string', default: 'stretch' },
        help: { type: 'boolean', default: false },
      },
      strict: true,
      allowPositionals: false,
    });
  } catch (err) {
    usageError((err as Error).message);
  }
  const { values } = args;
  if (values.help) {
    process.stdout.write(USAGE);
    return;
  }
  if (values.stdio === Boolean(values.port !== undefined)) {
    usageError('exactly one of --stdio or --port is required');
  }
  const batchLimit = parsePositiveInt(values['batch-limit']!, '--batch-limit');
  const port = values.port === undefined ? null : parsePositiveInt(values.port, '--port');
  if (values.norm !== 'unit' && values.norm !== 'center' && values.norm !== 'raw') {
    usageError(`--norm must be unit, center, or raw, got "${values.norm}"`);
  }
  if (values.crop !== 'stretch' && values.crop !== 'center-crop') {
    usageError(`--crop must be stretch or center-crop, got "${values.crop}"`);
  }
  const prep: PreprocessSpec = { resize: values.crop, normalize: values.norm };

  let model;
  try {
    model = await loadModel(values.model!, prep);
  } catch (err) {
    const message = err instanceof Error ? err.message : String(err);
    process.stderr.write(`gaborsense-adapter: model load failed: ${message}\n`);
    process.exit(1);
  }

  const server = new AdapterServer(model, batchLimit);
  if (port !== null) {
    await runTcp(server, port);
    process.stderr.write(
      `gaborsense-adapter: serving ${model.descriptor.name} on 127.0.0.1:${port}\n`,
    );
    return; // The listener keeps the event loop alive.
  }
  await runStdio(server);
  model.close();
}

main().catch((err) => {
  process.stderr.write(`gaborsense-adapter: ${err instanceof Error ? err.stack : err}\n`);
  process.exit(1);
});
