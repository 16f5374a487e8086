export {
  PROTOCOL_VERSION,
  ProtocolError,
  makeError,
  makeReply,
  salvageQid,
  validateRequest,
} from "./protocol.js";
export type { ErrorReply, PassageRecord, Reply, ScoringReply, ScoringRequest } from "./protocol.js";
export { INSTRUCTION_SUFFIX, ContextOverflowError, buildPrompt, truncateTail, words } from "./text.js";
export { CopyScorer, UniformScorer, loadModel, meanLogProb } from "./models.js";
export type { Scorer, ScoringItem, StubModelOptions } from "./models.js";
export { MicroBatcher, handleLine, processRequest, serveStdio, serveTcp } from "./server.js";
export type { ServerOptions, TcpHandle } from "./server.js";
