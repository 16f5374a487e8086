#!/usr/bin/env node
// Command-line entry point: pick a model, pick a transport, serve.

import { pathToFileURL } from "node:url";

import { loadModel } from "./models.js";
import { serveStdio, serveTcp } from "./server.js";
import type { ServerOptions } from "./server.js";

const USAGE = `usage: teacher-adapter [options]

Scores question likelihood given passages over the teacher wire protocol
(v=1, one JSON object per line) on stdio, or on a local TCP socket with
--tcp (the chosen port is announced on stderr as "LISTENING <port>").

options:
  --model <id>         scoring backend: uniform | copy (default uniform)
  --vocab-size <n>     stub vocabulary size (default 500)
  --alpha <x>          copy-model smoothing, > 0 (default 1.0)
  --max-context <n>    word budget for passage + question; longer passages
                       are tail-truncated, the question is always kept
                       whole (default 512)
  --batch <n>          requests scored per queue drain (default 8)
  --device <d>         accepted for model-backed scorers; stubs ignore it
  --precision <p>      accepted for model-backed scorers; stubs ignore it
  --error-on <substr>  fault injection: error reply for matching qids
  --tcp                serve on 127.0.0.1 instead of stdio
  --port <n>           TCP port; 0 picks an ephemeral one (default 0)
  --help               show this message
`;

export type Flags = {
  model: string;
  vocabSize: number;
  alpha: number;
  maxContext: number;
  batch: number;
  device: string;
  precision: string;
  errorOn?: string;
  tcp: boolean;
  port: number;
  help: boolean;
};

export class UsageError extends Error {}

export function parseFlags(argv: string[]): Flags {
  const flags: Flags = {
    model: "uniform",
    vocabSize: 500,
    alpha: 1.0,
    maxContext: 512,
    batch: 8,
    device: "cpu",
    precision: "float32",
    tcp: false,
    port: 0,
    help: false,
  };
  let i = 0;
  const next = (flag: string): string => {
    i += 1;
    const value = argv[i];
    if (value === undefined) throw new UsageError(`${flag} needs a value`);
    return value;
  };
  const nextInt = (flag: string, min: number): number => {
    const raw = next(flag);
    const value = Number(raw);
    if (!Number.isInteger(value) || value < min) {
      throw new UsageError(`${flag} must be an integer >= ${min}, got ${raw}`);
    }
    return value;
  };
  for (; i < argv.length; i++) {
    const arg = argv[i]!;
    switch (arg) {
      case "--model":
        flags.model = next(arg);
        break;
      case "--vocab-size":
        flags.vocabSize = nextInt(arg, 1);
        break;
      case "--alpha": {
        const raw = next(arg);
        flags.alpha = Number(raw);
        if (!(flags.alpha > 0) || !Number.isFinite(flags.alpha)) {
          throw new UsageError(`--alpha must be a positive real, got ${raw}`);
        }
        break;
      }
      case "--max-context":
        flags.maxContext = nextInt(arg, 1);
        break;
      case "--batch":
        flags.batch = nextInt(arg, 1);
        break;
      case "--device":
        flags.device = next(arg);
        break;
      case "--precision":
        flags.precision = next(arg);
        break;
      case "--error-on":
        flags.errorOn = next(arg);
        break;
      case "--tcp":
        flags.tcp = true;
        break;
      case "--port":
        flags.port = nextInt(arg, 0);
        break;
      case "--help":
        flags.help = true;
        break;
      default:
        throw new UsageError(`unknown flag ${arg}`);
    }
  }
  return flags;
}

async function main(argv: string[]): Promise<void> {
  let flags: Flags;
  try {
    flags = parseFlags(argv);
  } catch (exc) {
    process.stderr.write(`error: ${(exc as Error).message}\n${USAGE}`);
    process.exitCode = 2;
    return;
  }
  if (flags.help) {
    process.stdout.write(USAGE);
    return;
  }
  let opts: ServerOptions;
  try {
    opts = {
      model: loadModel(flags.model, { vocabSize: flags.vocabSize, alpha: flags.alpha }),
      maxContext: flags.maxContext,
      batchSize: flags.batch,
      errorOn: flags.errorOn,
    };
  } catch (exc) {
    process.stderr.write(`error: ${(exc as Error).message}\n`);
    process.exitCode = 2;
    return;
  }
  if (flags.tcp) {
    await serveTcp(opts, flags.port); // keeps the process alive until killed
  } else {
    await serveStdio(opts);
  }
}

const entry = process.argv[1];
if (entry !== undefined && import.meta.url === pathToFileURL(entry).href) {
  main(process.argv.slice(2)).catch((exc) => {
    process.stderr.write(`fatal: ${(exc as Error).stack ?? exc}\n`);
    process.exitCode = 1;
  });
}
