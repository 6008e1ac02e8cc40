/** Wire types mirroring the search service's JSON API. */

export type Measure = "cosine" | "dp" | "ndp";

export const MEASURES: Measure[] = ["cosine", "dp", "ndp"];

/** One ranked hit: a localized region in an image plus its score. */
export interface Hit {
  instance_id: number;
  image_id: string;
  /** Pixel box (x, y, w, h), top-left origin. */
  box: [number, number, number, number];
  score: number;
  rank: number;
}

export interface SearchResponse {
  query: string;
  tokens: string[];
  unk_flag: boolean;
  hits: Hit[];
}

/** Machine-readable error envelope every 4xx carries. */
export interface ApiErrorBody {
  code: string;
  message: string;
}

export class ApiError extends Error {
  readonly code: string;
  readonly status: number;

  constructor(code: string, message: string, status: number) {
    super(message);
    this.code = code;
    this.status = status;
  }
}
