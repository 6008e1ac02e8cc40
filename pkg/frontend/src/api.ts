/** Thin typed client for the search API. */

import { ApiError, Measure, SearchResponse } from "./types.js";

export type FetchLike = (input: string) => Promise<Response>;

async function throwApiError(response: Response): Promise<never> {
  let code = "http_error";
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as { code?: string; message?: string };
    if (body.code) code = body.code;
    if (body.message) message = body.message;
  } catch {
    // non-JSON error body: keep the generic description
  }
  throw new ApiError(code, message, response.status);
}

export async function searchRequest(
  baseUrl: string,
  query: string,
  k: number,
  measure: Measure,
  fetchFn: FetchLike = fetch,
): Promise<SearchResponse> {
  const params = new URLSearchParams({ q: query, k: String(k), measure });
  let response: Response;
  try {
    response = await fetchFn(`${baseUrl}/api/search?${params}`);
  } catch (err) {
    throw new ApiError("network_error", String(err), 0);
  }
  if (!response.ok) {
    await throwApiError(response);
  }
  return (await response.json()) as SearchResponse;
}

export function mediaUrl(baseUrl: string, imageId: string): string {
  return `${baseUrl}/media/${encodeURIComponent(imageId)}`;
}
