export { MissingColumnsError, readSummary, readTable } from "./csv.js";
export type { ModeSummary, Row, RunSummary } from "./csv.js";
export {
  DEFAULT_STYLE,
  FIGURE_KEYS,
  figureSpecs,
  renderFigure,
  renderFigureToString,
} from "./figures.js";
export type { FigureId, FigureKey, FigureSpec, FigureStyle } from "./figures.js";
export { main } from "./cli.js";
