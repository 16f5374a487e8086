// Scoring backends. A Scorer reports, for one passage, the mean per-token
// natural-log likelihood of the question given that passage.
//
// Two deterministic stubs ship with the adapter so CI never downloads
// model weights:
//   uniform: every token has probability 1/|V|; the mean is -log|V| for
//            every passage, returned as exactly that constant (averaging
//            n identical summands through floating point can drift an ulp).
//   copy:    copy-smoothed unigram over the passage words,
//            P(t | passage) = (count(t) + alpha) / (len + alpha * |V|),
//            averaged over the question words.
//
// A model-backed Scorer would feed `prompt` to its engine and teacher-force
// the question; the stubs read the normalized word lists directly.

export type ScoringItem = {
  questionWords: string[];
  passageWords: string[];
  prompt: string;
};

export interface Scorer {
  readonly id: string;
  scorePassage(item: ScoringItem): number;
  // Optional engine seam: score all passages of one question in a single
  // call. Absent on the stubs, which are pure per-passage functions.
  scoreBatch?(items: ScoringItem[]): number[];
}

export type StubModelOptions = {
  vocabSize: number;
  alpha: number;
};

// Length normalization: summed token log-probs divided by token count.
export function meanLogProb(tokenLogProbs: number[]): number {
  if (tokenLogProbs.length === 0) {
    throw new Error("cannot normalize an empty log-prob sequence");
  }
  let total = 0;
  for (const lp of tokenLogProbs) total += lp;
  return total / tokenLogProbs.length;
}

export class UniformScorer implements Scorer {
  readonly id = "uniform";
  private readonly score: number;

  constructor(vocabSize: number) {
    checkVocabSize(vocabSize);
    this.score = -Math.log(vocabSize);
  }

  scorePassage(_item: ScoringItem): number {
    return this.score;
  }
}

export class CopyScorer implements Scorer {
  readonly id = "copy";

  constructor(
    private readonly vocabSize: number,
    private readonly alpha: number,
  ) {
    checkVocabSize(vocabSize);
    if (!(alpha > 0) || !Number.isFinite(alpha)) {
      throw new Error(`smoothing alpha must be a positive real, got ${alpha}`);
    }
  }

  tokenLogProbs(item: ScoringItem): number[] {
    const counts = new Map<string, number>();
    for (const w of item.passageWords) {
      counts.set(w, (counts.get(w) ?? 0) + 1);
    }
    const denom = item.passageWords.length + this.alpha * this.vocabSize;
    return item.questionWords.map((w) => Math.log(((counts.get(w) ?? 0) + this.alpha) / denom));
  }

  scorePassage(item: ScoringItem): number {
    return meanLogProb(this.tokenLogProbs(item));
  }
}

function checkVocabSize(vocabSize: number): void {
  if (!Number.isInteger(vocabSize) || vocabSize < 1) {
    throw new Error(`vocabulary size must be a positive integer, got ${vocabSize}`);
  }
}

const STUB_MODELS = ["copy", "uniform"] as const;

// Resolve a model id to a Scorer. Only the CI stubs are bundled; anything
// else would need a model-backed Scorer implementation on local hardware.
export function loadModel(id: string, opts: StubModelOptions): Scorer {
  switch (id) {
    case "uniform":
      return new UniformScorer(opts.vocabSize);
    case "copy":
      return new CopyScorer(opts.vocabSize, opts.alpha);
    default:
      throw new Error(`unknown model id ${JSON.stringify(id)} (bundled stubs: ${STUB_MODELS.join(", ")})`);
  }
}
