/** Search view state and its transitions.
 *
 * All transitions are pure; `submitSearch` orchestrates one async request.
 * A monotonically increasing sequence number tags each submission, and a
 * response is applied only while its number is still current, so a stale
 * in-flight response can never overwrite a newer one. The error banner and
 * the results grid are mutually exclusive by construction: every terminal
 * transition clears one side.
 */

import { searchRequest, FetchLike } from "./api.js";
import { ApiError, Hit, Measure, SearchResponse } from "./types.js";

export interface SearchViewState {
  query: string;
  k: number;
  measure: Measure;
  loading: boolean;
  hits: Hit[];
  tokens: string[];
  unkFlag: boolean;
  errorBanner: string | null;
  requestSeq: number;
  /** set once any search has completed, so "no results" can be told apart
   * from "nothing searched yet" */
  searched: boolean;
}

export function initialState(): SearchViewState {
  return {
    query: "",
    k: 10,
    measure: "cosine",
    loading: false,
    hits: [],
    tokens: [],
    unkFlag: false,
    errorBanner: null,
    requestSeq: 0,
    searched: false,
  };
}

export function beginSearch(state: SearchViewState): SearchViewState {
  return { ...state, loading: true, requestSeq: state.requestSeq + 1 };
}

export function applyResponse(
  state: SearchViewState,
  seq: number,
  response: SearchResponse,
): SearchViewState {
  if (seq !== state.requestSeq) {
    return state; // stale: a newer submission owns the view
  }
  return {
    ...state,
    loading: false,
    searched: true,
    hits: response.hits,
    tokens: response.tokens,
    unkFlag: response.unk_flag,
    errorBanner: null,
  };
}

export function applyError(
  state: SearchViewState,
  seq: number,
  error: ApiError,
): SearchViewState {
  if (seq !== state.requestSeq) {
    return state;
  }
  return {
    ...state,
    loading: false,
    searched: true,
    hits: [],
    tokens: [],
    unkFlag: false,
    errorBanner: error.code,
  };
}

export interface SubmitDeps {
  baseUrl: string;
  fetchFn?: FetchLike;
}

/** Validate, dispatch, and settle one search. Returns the new state after
 * the request settles (or immediately for an empty query, with no network
 * call). `getState`/`setState` let the caller observe intermediate state. */
export async function submitSearch(
  getState: () => SearchViewState,
  setState: (s: SearchViewState) => void,
  deps: SubmitDeps,
): Promise<SearchViewState> {
  const state = getState();
  if (!state.query.trim()) {
    return state; // client-side validation: no network call
  }
  const started = beginSearch(state);
  setState(started);
  const seq = started.requestSeq;
  try {
    const response = await searchRequest(
      deps.baseUrl,
      started.query,
      started.k,
      started.measure,
      deps.fetchFn,
    );
    const settled = applyResponse(getState(), seq, response);
    setState(settled);
    return settled;
  } catch (err) {
    const apiError =
      err instanceof ApiError ? err : new ApiError("client_error", String(err), 0);
    const settled = applyError(getState(), seq, apiError);
    setState(settled);
    return settled;
  }
}

/** Trailing-edge debounce for live-typing search. */
export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number,
): (...args: A) => void {
  let timer: ReturnType<typeof setTimeout> | undefined;
  return (...args: A) => {
    if (timer !== undefined) clearTimeout(timer);
    timer = setTimeout(() => fn(...args), waitMs);
  };
}
