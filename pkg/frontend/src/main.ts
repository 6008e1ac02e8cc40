/** Page wiring: form, measure/k controls, debounced live search. */

import { renderResults } from "./render.js";
import {
  debounce,
  initialState,
  SearchViewState,
  submitSearch,
} from "./state.js";
import { Measure, MEASURES } from "./types.js";

const BASE_URL = ""; // same origin; the engine serves both API and UI

function bootstrap(): void {
  const form = document.getElementById("search-form") as HTMLFormElement;
  const input = document.getElementById("query-input") as HTMLInputElement;
  const kSelect = document.getElementById("k-select") as HTMLSelectElement;
  const measureSelect = document.getElementById("measure-select") as HTMLSelectElement;
  const results = document.getElementById("results") as HTMLElement;
  const status = document.getElementById("status") as HTMLElement;

  for (const m of MEASURES) {
    const option = document.createElement("option");
    option.value = m;
    option.textContent = m;
    measureSelect.appendChild(option);
  }

  let state: SearchViewState = initialState();
  const getState = () => state;
  const setState = (next: SearchViewState) => {
    state = next;
    status.textContent = state.loading ? "searching…" : "";
    renderResults(results, state, BASE_URL);
  };

  const runSearch = () => {
    state = {
      ...state,
      query: input.value,
      k: Number(kSelect.value),
      measure: measureSelect.value as Measure,
    };
    void submitSearch(getState, setState, { baseUrl: BASE_URL });
  };

  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    runSearch();
  });
  input.addEventListener("input", debounce(runSearch, 300));
  kSelect.addEventListener("change", runSearch);
  measureSelect.addEventListener("change", runSearch);
}

document.addEventListener("DOMContentLoaded", bootstrap);
