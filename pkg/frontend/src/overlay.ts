/** Bounding-box overlay geometry.
 *
 * A hit's box is in native image pixels; the overlay must be the exact
 * (displayed / natural) scaling of those coordinates in both axes.
 */

export interface OverlayRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export function scaleBox(
  box: [number, number, number, number],
  naturalWidth: number,
  naturalHeight: number,
  displayWidth: number,
  displayHeight: number,
): OverlayRect {
  const sx = displayWidth / naturalWidth;
  const sy = displayHeight / naturalHeight;
  const [x, y, w, h] = box;
  return { left: x * sx, top: y * sy, width: w * sx, height: h * sy };
}

/** Placeholder geometry when media is unavailable: normalize the box by its
 * own extent so it always fits a fixed-size schematic tile. */
export function placeholderBox(
  box: [number, number, number, number],
  tileSize: number,
): OverlayRect {
  const [x, y, w, h] = box;
  const extent = Math.max(x + w, y + h, 1);
  const s = tileSize / extent;
  return { left: x * s, top: y * s, width: w * s, height: h * s };
}

export function rectStyle(rect: OverlayRect): string {
  return (
    `left:${rect.left.toFixed(2)}px;top:${rect.top.toFixed(2)}px;` +
    `width:${rect.width.toFixed(2)}px;height:${rect.height.toFixed(2)}px`
  );
}
