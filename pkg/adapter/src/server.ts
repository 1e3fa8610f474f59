/**
 * Protocol server: one JSON frame in, one JSON frame out, strictly in order.
 *
 * Requests on a connection are handled serially (the read loop awaits each
 * reply before consuming the next line), matching the client's
 * one-request-in-flight discipline. Malformed input never kills the process:
 * it is answered with an error frame and the connection keeps serving.
 */

import net from 'node:net';
import { createInterface } from 'node:readline';
import type { Readable, Writable } from 'node:stream';

import type { ServedModel } from './model.js';
import { ModelError } from './model.js';
import type { ErrorReply, MetaReply, PredictReply } from './protocol.js';
import { decodeBatch, parseRequest, ProtocolError } from './protocol.js';

export class AdapterServer {
  constructor(
    private readonly model: ServedModel,
    readonly batchLimit: number,
  ) {}

  /** Answer one request line with one reply line (no trailing newline). */
  async handleLine(line: string): Promise<string> {
    let id: number | null = null;
    try {
      const req = parseRequest(line);
      if (req.op === 'meta') {
        const d = this.model.descriptor;
        const reply: MetaReply = {
          op: 'meta',
          name: d.name,
          width: d.width,
          height: d.height,
          channels: d.channels,
          classes: d.classes,
        };
        return JSON.stringify(reply);
      }
      id = req.id;
      if (req.batch > this.batchLimit) {
        throw new ProtocolError(
          `batch ${req.batch} exceeds the configured limit ${this.batchLimit}`,
          req.id,
        );
      }
      const pixels = decodeBatch(req);
      const probs = await this.model.predict(pixels, {
        batch: req.batch,
        width: req.width,
        height: req.height,
        channels: req.channels,
      });
      const reply: PredictReply = { op: 'predict', id: req.id, probs };
      return JSON.stringify(reply);
    } catch (err) {
      if (err instanceof ProtocolError && err.id !== null) {
        id = err.id;
      }
      const message =
        err instanceof ProtocolError || err instanceof ModelError
          ? err.message
          : `internal error: ${err instanceof Error ? err.message : String(err)}`;
      const reply: ErrorReply = { op: 'error', id, message };
      return JSON.stringify(reply);
    }
  }

  /** Serve a line stream until EOF. Blank lines are ignored. */
  async serveStream(input: Readable, output: Writable): Promise<void> {
    const rl = createInterface({ input, crlfDelay: Infinity });
    for await (const line of rl) {
      if (!line.trim()) {
        continue;
      }
      output.write((await this.handleLine(line)) + '\n');
    }
  }
}

export async function runStdio(server: AdapterServer): Promise<void> {
  await server.serveStream(process.stdin, process.stdout);
}

/** Listen on a TCP port; each connection gets its own serial read loop. */
export function runTcp(
  server: AdapterServer,
  port: number,
  host = '127.0.0.1',
): Promise<net.Server> {
  const listener = net.createServer((socket) => {
    socket.on('error', () => socket.destroy());
    server.serveStream(socket, socket).catch(() => socket.destroy());
  });
  return new Promise((resolve, reject) => {
    listener.once('error', reject);
    listener.listen(port, host, () => resolve(listener));
  });
}
