/** Schedule-matrix helpers: cell access for rendering and a color ramp.
 *
 * Rows are tokens (history rows pinned at zero), columns run from the first
 * solver step (max noise) to the last (clean).
 */

import { SchedulePayload } from "./api.js";

export interface HeatmapModel {
  rows: number;
  cols: number;
  cellValue(row: number, col: number): number;
  cellColor(row: number, col: number): string;
  roleOf(row: number): string;
}

/** Dark-to-bright ramp over sigma in [0, 1]. */
export function sigmaColor(value: number): string {
  const v = Math.max(0, Math.min(1, value));
  const r = Math.round(40 + 215 * v);
  const g = Math.round(30 + 190 * v);
  const b = Math.round(90 + 40 * (1 - v));
  return `rgb(${r},${g},${b})`;
}

export function heatmapModel(schedule: SchedulePayload): HeatmapModel {
  const values = schedule.values;
  const rows = values.length;
  const cols = rows > 0 ? values[0]!.length : 0;
  return {
    rows,
    cols,
    cellValue: (row, col) => values[row]![col]!,
    cellColor: (row, col) => sigmaColor(values[row]![col]!),
    roleOf: (row) => schedule.roles[row] ?? "unknown",
  };
}
