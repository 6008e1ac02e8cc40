/** DOM rendering: result cards in API rank order, box overlays, banners.
 *
 * Rendering is a pure function of the view state: the container is rebuilt
 * on every call, hits strictly in the order the API returned them. No
 * client-side ranking logic exists anywhere in this UI.
 */

import { mediaUrl } from "./api.js";
import { placeholderBox, rectStyle, scaleBox } from "./overlay.js";
import { Hit } from "./types.js";
import { SearchViewState } from "./state.js";

const PLACEHOLDER_TILE = 160;

export function renderHit(hit: Hit, baseUrl: string): HTMLElement {
  const card = document.createElement("figure");
  card.className = "hit-card";
  card.dataset.rank = String(hit.rank);
  card.dataset.instanceId = String(hit.instance_id);

  const frame = document.createElement("div");
  frame.className = "hit-frame";
  card.appendChild(frame);

  const img = document.createElement("img");
  img.className = "hit-image";
  img.alt = `instance ${hit.instance_id} in ${hit.image_id}`;
  img.src = mediaUrl(baseUrl, hit.image_id);

  const overlay = document.createElement("div");
  overlay.className = "hit-box";

  img.addEventListener("load", () => {
    const rect = scaleBox(
      hit.box,
      img.naturalWidth || 1,
      img.naturalHeight || 1,
      img.clientWidth || img.naturalWidth || 1,
      img.clientHeight || img.naturalHeight || 1,
    );
    overlay.setAttribute("style", rectStyle(rect));
  });
  img.addEventListener("error", () => {
    renderPlaceholder(frame, hit);
  });

  frame.appendChild(img);
  frame.appendChild(overlay);

  const caption = document.createElement("figcaption");
  caption.className = "hit-caption";
  const [x, y, w, h] = hit.box;
  caption.textContent =
    `#${hit.rank} · ${hit.score.toFixed(6)} · ${hit.image_id} · ` +
    `(${x}, ${y}, ${w}×${h})`;
  card.appendChild(caption);
  return card;
}

/** Schematic tile with the box drawn in normalized coordinates; used when
 * the media endpoint has nothing for the image. */
export function renderPlaceholder(frame: HTMLElement, hit: Hit): void {
  frame.replaceChildren();
  frame.classList.add("hit-frame-placeholder");
  const tile = document.createElement("div");
  tile.className = "placeholder-tile";
  tile.style.width = `${PLACEHOLDER_TILE}px`;
  tile.style.height = `${PLACEHOLDER_TILE}px`;
  const box = document.createElement("div");
  box.className = "hit-box";
  box.setAttribute("style", rectStyle(placeholderBox(hit.box, PLACEHOLDER_TILE)));
  const label = document.createElement("span");
  label.className = "placeholder-label";
  label.textContent = hit.image_id;
  tile.appendChild(box);
  tile.appendChild(label);
  frame.appendChild(tile);
}

export function renderResults(
  root: HTMLElement,
  state: SearchViewState,
  baseUrl: string,
): void {
  root.replaceChildren();

  if (state.errorBanner) {
    const banner = document.createElement("div");
    banner.className = "error-banner";
    banner.setAttribute("role", "alert");
    banner.textContent = `search failed: ${state.errorBanner}`;
    root.appendChild(banner);
    return; // banner and grid are mutually exclusive
  }

  if (state.unkFlag) {
    const hint = document.createElement("div");
    hint.className = "unk-hint";
    hint.textContent = "query contains unknown words";
    root.appendChild(hint);
  }

  if (state.tokens.length) {
    const tokens = document.createElement("div");
    tokens.className = "token-strip";
    tokens.textContent = `tokens: ${state.tokens.join(" ")}`;
    root.appendChild(tokens);
  }

  const grid = document.createElement("div");
  grid.className = "results-grid";
  for (const hit of state.hits) {
    grid.appendChild(renderHit(hit, baseUrl));
  }
  root.appendChild(grid);

  if (state.searched && !state.hits.length) {
    const empty = document.createElement("div");
    empty.className = "empty-note";
    empty.textContent = "no results";
    root.appendChild(empty);
  }
}

export function displayedRanks(root: HTMLElement): number[] {
  return Array.from(root.querySelectorAll<HTMLElement>(".hit-card")).map((el) =>
    Number(el.dataset.rank),
  );
}

export function displayedInstanceIds(root: HTMLElement): number[] {
  return Array.from(root.querySelectorAll<HTMLElement>(".hit-card")).map((el) =>
    Number(el.dataset.instanceId),
  );
}
