/**
 * make_figures --in <dir> --out <dir> [--which all|fig2|fig3|fig4|fig5]
 *
 * Renders the figure analogs from a completed run directory (see
 * figureSpecs for the expected layout). Exit codes: 0 success, 1 on bad
 * arguments or unreadable/invalid inputs.
 */
import { parseArgs } from "node:util";

import { FIGURE_KEYS, figureSpecs, renderFigure, type FigureKey }
  from "./figures.js";

const USAGE =
  "usage: make_figures --in <dir> --out <dir> [--which all|fig2|fig3|fig4|fig5]";

export function main(argv: string[]): number {
  let values;
  try {
    ({ values } = parseArgs({
      args: argv,
      options: {
        in: { type: "string" },
        out: { type: "string" },
        which: { type: "string", default: "all" },
      },
      allowPositionals: false,
    }));
  } catch (err) {
    console.error(`${(err as Error).message}\n${USAGE}`);
    return 1;
  }
  if (values.in === undefined || values.out === undefined) {
    console.error(`--in and --out are required\n${USAGE}`);
    return 1;
  }
  const which = values.which ?? "all";
  if (which !== "all" && !FIGURE_KEYS.includes(which as FigureKey)) {
    console.error(`unknown figure '${which}', expected one of: all, ` +
      FIGURE_KEYS.join(", "));
    return 1;
  }
  const specs = figureSpecs(values.in, values.out);
  const keys = which === "all" ? FIGURE_KEYS : [which as FigureKey];
  for (const key of keys) {
    try {
      const path = renderFigure(specs[key]);
      console.log(`${key}: ${path}`);
    } catch (err) {
      console.error(`${key}: ${(err as Error).message}`);
      return 1;
    }
  }
  return 0;
}
