// Teacher wire protocol (v=1), one JSON object per line.
//
//   request: {"v":1, "qid": string, "question": string,
//             "passages": [{"id": string, "title": string, "text": string}]}
//   reply:   {"v":1, "qid": string, "scores": [number]}   one per passage
//   error:   {"v":1, "qid": string, "error": string}
//
// Scores are mean per-token log-probabilities of the question given the
// passage, natural log, finite, <= 0. Replies may be written in any order;
// clients match them to requests by qid.

export const PROTOCOL_VERSION = 1;

export type PassageRecord = {
  id: string;
  title: string;
  text: string;
};

export type ScoringRequest = {
  v: typeof PROTOCOL_VERSION;
  qid: string;
  question: string;
  passages: PassageRecord[];
};

export type ScoringReply = {
  v: typeof PROTOCOL_VERSION;
  qid: string;
  scores: number[];
};

export type ErrorReply = {
  v: typeof PROTOCOL_VERSION;
  qid: string;
  error: string;
};

export type Reply = ScoringReply | ErrorReply;

export class ProtocolError extends Error {}

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

// Best-effort qid extraction from an invalid request, so the error reply
// can still be matched to the request that caused it.
export function salvageQid(value: unknown): string {
  if (isRecord(value) && typeof value.qid === "string") return value.qid;
  return "";
}

export function validateRequest(value: unknown): ScoringRequest {
  if (!isRecord(value)) {
    throw new ProtocolError("request must be a JSON object");
  }
  if (value.v !== PROTOCOL_VERSION) {
    throw new ProtocolError(`protocol version ${JSON.stringify(value.v)}, expected ${PROTOCOL_VERSION}`);
  }
  if (typeof value.qid !== "string") {
    throw new ProtocolError("request qid must be a string");
  }
  if (typeof value.question !== "string") {
    throw new ProtocolError("request question must be a string");
  }
  const passages = value.passages;
  if (!Array.isArray(passages)) {
    throw new ProtocolError("request passages must be an array");
  }
  for (let i = 0; i < passages.length; i++) {
    const p: unknown = passages[i];
    if (!isRecord(p)) {
      throw new ProtocolError(`passage ${i} must be an object`);
    }
    for (const field of ["id", "title", "text"] as const) {
      if (typeof p[field] !== "string") {
        throw new ProtocolError(`passage ${i} field ${field} must be a string`);
      }
    }
  }
  return value as ScoringRequest;
}

export function makeReply(qid: string, scores: number[]): ScoringReply {
  for (const s of scores) {
    if (typeof s !== "number" || !Number.isFinite(s) || s > 0) {
      throw new ProtocolError(`relevance score must be finite and <= 0, got ${s}`);
    }
  }
  return { v: PROTOCOL_VERSION, qid, scores };
}

export function makeError(qid: string, message: string): ErrorReply {
  return { v: PROTOCOL_VERSION, qid, error: message };
}
