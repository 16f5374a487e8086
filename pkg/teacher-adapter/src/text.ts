// Text normalization, prompt assembly, and the context-length policy.

// Appended to the passage content when assembling the conditioning prompt
// for autoregressive backends. Prompt scaffolding only: stub models score
// the passage words directly, so the suffix never enters their statistics.
export const INSTRUCTION_SUFFIX = "Please write a question based on this passage.";

// Lowercase, keep [a-z0-9]+ runs, drop everything else. Must match the
// primary trainer's normalization so scores are comparable across teachers.
export function words(text: string): string[] {
  return text.toLowerCase().match(/[a-z0-9]+/g) ?? [];
}

export class ContextOverflowError extends Error {}

// Tail-truncate the passage so passage + question fit in maxContext words.
// The question is always kept whole; a question that alone exceeds the
// context limit cannot be scored at all.
export function truncateTail(passageWords: string[], questionLength: number, maxContext: number): string[] {
  if (questionLength > maxContext) {
    throw new ContextOverflowError(
      `question has ${questionLength} words, exceeding the context limit of ${maxContext}`,
    );
  }
  const budget = maxContext - questionLength;
  return passageWords.length > budget ? passageWords.slice(0, budget) : passageWords;
}

// Conditioning prompt for prompt-consuming backends: the (truncated)
// passage words followed by the instruction suffix. The question itself is
// never part of the prompt; it is scored token by token against it.
export function buildPrompt(passageWords: string[]): string {
  if (passageWords.length === 0) return INSTRUCTION_SUFFIX;
  return `${passageWords.join(" ")}\n${INSTRUCTION_SUFFIX}`;
}
