// NDJSON scoring service over stdio or a local TCP socket.
//
// One model instance serves a single request queue; a drain pass scores up
// to batchSize queued requests. Each request's passages are scored together
// (one scoreBatch call per question when the backend provides it). Any
// failure, from an undecodable line to a scoring error, becomes an error
// reply for that request; the connection always stays alive.

import * as net from "node:net";
import * as readline from "node:readline";

import type { Scorer, ScoringItem } from "./models.js";
import { makeError, makeReply, salvageQid, validateRequest } from "./protocol.js";
import type { Reply, ScoringRequest } from "./protocol.js";
import { buildPrompt, truncateTail, words } from "./text.js";

export type ServerOptions = {
  model: Scorer;
  maxContext: number; // word budget shared by passage and question
  batchSize: number; // requests scored per queue drain
  errorOn?: string; // fault injection: error reply for qids containing this
};

export function processRequest(opts: ServerOptions, request: ScoringRequest): Reply {
  if (opts.errorOn && request.qid.includes(opts.errorOn)) {
    return makeError(request.qid, "injected failure");
  }
  try {
    const questionWords = words(request.question);
    if (questionWords.length === 0) {
      throw new Error("question has no words after normalization");
    }
    const items: ScoringItem[] = request.passages.map((p) => {
      const passageWords = truncateTail(
        words(p.title).concat(words(p.text)),
        questionWords.length,
        opts.maxContext,
      );
      return { questionWords, passageWords, prompt: buildPrompt(passageWords) };
    });
    const scores = opts.model.scoreBatch
      ? opts.model.scoreBatch(items)
      : items.map((item) => opts.model.scorePassage(item));
    if (scores.length !== items.length) {
      throw new Error(`backend returned ${scores.length} scores for ${items.length} passages`);
    }
    return makeReply(request.qid, scores);
  } catch (exc) {
    return makeError(request.qid, (exc as Error).message);
  }
}

export function handleLine(opts: ServerOptions, line: string): Reply {
  let value: unknown;
  try {
    value = JSON.parse(line);
  } catch (exc) {
    return makeError("", `undecodable request line: ${(exc as Error).message}`);
  }
  let request: ScoringRequest;
  try {
    request = validateRequest(value);
  } catch (exc) {
    return makeError(salvageQid(value), (exc as Error).message);
  }
  return processRequest(opts, request);
}

type Job = {
  line: string;
  write: (line: string) => void;
};

export class MicroBatcher {
  readonly stats = { jobs: 0, drains: 0 };
  private queue: Job[] = [];
  private scheduled = false;
  private idleWaiters: (() => void)[] = [];

  constructor(private readonly opts: ServerOptions) {}

  push(line: string, write: (line: string) => void): void {
    if (line.trim() === "") return; // blank keep-alive lines are ignored
    this.queue.push({ line, write });
    this.schedule();
  }

  // Resolves once every queued request has been answered.
  idle(): Promise<void> {
    if (this.queue.length === 0 && !this.scheduled) return Promise.resolve();
    return new Promise((resolve) => this.idleWaiters.push(resolve));
  }

  private schedule(): void {
    if (this.scheduled) return;
    this.scheduled = true;
    setImmediate(() => this.drain());
  }

  private drain(): void {
    this.scheduled = false;
    const batch = this.queue.splice(0, this.opts.batchSize);
    if (batch.length > 0) {
      this.stats.drains += 1;
      for (const job of batch) {
        this.stats.jobs += 1;
        job.write(JSON.stringify(handleLine(this.opts, job.line)));
      }
    }
    if (this.queue.length > 0) {
      this.schedule();
    } else {
      const waiters = this.idleWaiters;
      this.idleWaiters = [];
      for (const resolve of waiters) resolve();
    }
  }
}

// Serve until the input stream ends; resolves after the last reply is out.
export async function serveStdio(
  opts: ServerOptions,
  input: NodeJS.ReadableStream = process.stdin,
  output: NodeJS.WritableStream = process.stdout,
): Promise<void> {
  const batcher = new MicroBatcher(opts);
  const rl = readline.createInterface({ input });
  await new Promise<void>((resolve) => {
    rl.on("line", (line) => batcher.push(line, (reply) => output.write(reply + "\n")));
    rl.on("close", resolve);
  });
  await batcher.idle();
}

export type TcpHandle = {
  port: number;
  close(): Promise<void>;
};

// Listen on 127.0.0.1 and announce "LISTENING <port>" so harnesses can
// discover an ephemeral port (port 0). All connections share one queue.
export function serveTcp(
  opts: ServerOptions,
  port: number,
  announce: (msg: string) => void = (msg) => process.stderr.write(msg + "\n"),
): Promise<TcpHandle> {
  const batcher = new MicroBatcher(opts);
  const sockets = new Set<net.Socket>();
  const server = net.createServer((socket) => {
    sockets.add(socket);
    socket.setEncoding("utf-8");
    let buf = "";
    socket.on("data", (chunk: string) => {
      buf += chunk;
      let nl;
      while ((nl = buf.indexOf("\n")) >= 0) {
        const line = buf.slice(0, nl);
        buf = buf.slice(nl + 1);
        batcher.push(line, (reply) => {
          if (!socket.writableEnded) socket.write(reply + "\n");
        });
      }
    });
    socket.on("error", () => socket.destroy());
    socket.on("close", () => sockets.delete(socket));
  });
  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(port, "127.0.0.1", () => {
      const actual = (server.address() as net.AddressInfo).port;
      announce(`LISTENING ${actual}`);
      resolve({
        port: actual,
        close: () =>
          new Promise((done) => {
            for (const socket of sockets) socket.destroy();
            server.close(() => done());
          }),
      });
    });
  });
}
