/**
 * Figure analogs rendered from a completed run directory. The module
 * reads windows.csv / summary.json / sweep.csv verbatim and performs no
 * computation beyond unit conversion (bits/s to Mbps, counts per window
 * to MHz, error ratios to percent). Output is deterministic SVG.
 *
 * Directory convention consumed by figureSpecs(): the input directory
 * holds `sequential/` and `active/` run outputs (windows.csv plus
 * summary.json each) and a `sweep.csv` from a loss sweep.
 */
import { mkdirSync, writeFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { scaleLinear, type ScaleLinear } from "d3-scale";

import { readSummary, readTable, type Row, type RunSummary } from "./csv.js";
import { Svg, drawAxes, fmt } from "./svg.js";

export type FigureId =
  | "qber_vs_time"
  | "det_rate_and_skr_vs_time"
  | "skr_vs_time_decoy"
  | "skr_vs_loss";

export interface FigureStyle {
  width: number;
  height: number;
  marginTop: number;
  marginRight: number;
  marginBottom: number;
  marginLeft: number;
  panelGap: number;
}

export const DEFAULT_STYLE: FigureStyle = {
  width: 640,
  height: 400,
  marginTop: 24,
  marginRight: 20,
  marginBottom: 48,
  marginLeft: 64,
  panelGap: 40,
};

export interface FigureSpec {
  id: FigureId;
  output: string;
  windowsCsv?: string;
  summaryJson?: string;
  sweepCsv?: string;
  style?: Partial<FigureStyle>;
}

export const FIGURE_KEYS = ["fig2", "fig3", "fig4", "fig5"] as const;
export type FigureKey = (typeof FIGURE_KEYS)[number];

const MODE_COLORS: Record<number, string> = { 1: "#1f6fb4", 2: "#c85a19" };
const DECOY_COLORS: Record<number, string> = { 1: "#7fb3d8", 2: "#e3a57f" };
const SHADE = "#ececec";

/** Standard spec set for one input/output directory pair. */
export function figureSpecs(inDir: string, outDir: string):
    Record<FigureKey, FigureSpec> {
  const seq = join(inDir, "sequential");
  const act = join(inDir, "active");
  return {
    fig2: {
      id: "qber_vs_time",
      windowsCsv: join(seq, "windows.csv"),
      summaryJson: join(seq, "summary.json"),
      output: join(outDir, "qber_vs_time.svg"),
    },
    fig3: {
      id: "det_rate_and_skr_vs_time",
      windowsCsv: join(seq, "windows.csv"),
      summaryJson: join(seq, "summary.json"),
      output: join(outDir, "det_rate_and_skr_vs_time.svg"),
    },
    fig4: {
      id: "skr_vs_time_decoy",
      windowsCsv: join(act, "windows.csv"),
      summaryJson: join(act, "summary.json"),
      output: join(outDir, "skr_vs_time_decoy.svg"),
    },
    fig5: {
      id: "skr_vs_loss",
      sweepCsv: join(inDir, "sweep.csv"),
      summaryJson: join(act, "summary.json"),
      output: join(outDir, "skr_vs_loss.svg"),
    },
  };
}

function need<T>(value: T | undefined, what: string, id: FigureId): T {
  if (value === undefined) {
    throw new Error(`figure ${id} requires ${what}`);
  }
  return value;
}

function style(spec: FigureSpec): FigureStyle {
  return { ...DEFAULT_STYLE, ...spec.style };
}

function modes(rows: readonly Row[]): number[] {
  return [...new Set(rows.map((r) => r.mode))].sort((a, b) => a - b);
}

function byMode(rows: readonly Row[], mode: number): Row[] {
  return rows.filter((r) => r.mode === mode);
}

function extent(values: readonly number[], fallback: readonly [number, number],
                padFraction = 0.08): [number, number] {
  const finite = values.filter((v) => Number.isFinite(v));
  if (finite.length === 0) return [fallback[0], fallback[1]];
  let lo = Math.min(...finite, 0);
  let hi = Math.max(...finite);
  if (lo === hi) hi = lo + 1;
  const pad = (hi - lo) * padFraction;
  return [lo < 0 ? lo - pad : lo, hi + pad];
}

function provenance(svg: Svg, summary: RunSummary, st: FigureStyle): void {
  svg.text(`seed ${summary.seed}, scenario ${summary.scenario_digest}`,
           st.width - st.marginRight, st.height - 6,
           { anchor: "end", size: 9, fill: "#777" });
}

function emptyNote(svg: Svg, x: ScaleLinear<number, number>,
                   y: ScaleLinear<number, number>): void {
  const [x0, x1] = x.range();
  const [y0, y1] = y.range();
  svg.text("no data", (x0 + x1) / 2, (y0 + y1) / 2,
           { anchor: "middle", fill: "#999" });
}

function shadeWindows(svg: Svg, x: ScaleLinear<number, number>,
                      yTop: number, yBottom: number,
                      summary: RunSummary): void {
  const count = Math.round(summary.duration_s / summary.window_s);
  for (let k = 0; k < count; k += 2) {
    const x0 = x(k * summary.window_s);
    const x1 = x(Math.min((k + 1) * summary.window_s, summary.duration_s));
    svg.rect(x0, yTop, x1 - x0, yBottom - yTop, SHADE, "window-shade");
  }
}

function mbps(bps: number): string {
  return (bps / 1e6).toPrecision(3);
}

/** One SKR-vs-time panel: raw per-window rates, shaded windows, std notes. */
function skrPanel(svg: Svg, rows: readonly Row[], summary: RunSummary,
                  x: ScaleLinear<number, number>, yTop: number,
                  yBottom: number): void {
  const raw = rows.map((r) => r.skl_raw_bits / summary.window_s / 1e6);
  const y = scaleLinear().domain(extent(raw, [0, 1]))
    .range([yBottom, yTop]);
  shadeWindows(svg, x, yTop, yBottom, summary);
  drawAxes(svg, x, y, { x: "time [s]", y: "raw SKR [Mbps]" });
  if (rows.length === 0) {
    emptyNote(svg, x, y);
    return;
  }
  if (y.domain()[0] < 0) {
    svg.line(x.range()[0], y(0), x.range()[1], y(0), "#999", 0.75);
  }
  let note = 0;
  for (const m of modes(rows)) {
    const series = byMode(rows, m);
    svg.polyline(
      series.map((r) => [x(r.window_start_s),
                         y(r.skl_raw_bits / summary.window_s / 1e6)] as const),
      MODE_COLORS[m] ?? "#444", `skr-mode-${m}`);
    const std = summary.modes[String(m)]?.std_skr_bps;
    if (std !== undefined) {
      svg.text(`mode ${m} std ${mbps(std)} Mbps`,
               x.range()[1], yTop + 12 + 14 * note,
               { anchor: "end", size: 10, fill: MODE_COLORS[m] ?? "#444" });
      note += 1;
    }
  }
}

function renderQberVsTime(spec: FigureSpec): string {
  const st = style(spec);
  const rows = readTable(need(spec.windowsCsv, "windows.csv", spec.id),
                         ["window_start_s", "mode", "qber_z"]);
  const summary = readSummary(need(spec.summaryJson, "summary.json", spec.id));
  const svg = new Svg(st.width, st.height);
  const x = scaleLinear()
    .domain([0, rows.length > 0 ? summary.duration_s : 1])
    .range([st.marginLeft, st.width - st.marginRight]);
  const y = scaleLinear()
    .domain(extent(rows.map((r) => r.qber_z * 100), [0, 1]))
    .range([st.height - st.marginBottom, st.marginTop]);
  drawAxes(svg, x, y, { x: "time [s]", y: "key-basis QBER [%]" });
  if (rows.length === 0) {
    emptyNote(svg, x, y);
  }
  for (const m of modes(rows)) {
    svg.polyline(
      byMode(rows, m).map((r) =>
        [x(r.window_start_s), y(r.qber_z * 100)] as const),
      MODE_COLORS[m] ?? "#444", `qber-mode-${m}`);
  }
  provenance(svg, summary, st);
  return svg.render();
}

function renderDetRateAndSkr(spec: FigureSpec): string {
  const st = { ...style(spec), height: Math.max(style(spec).height, 560) };
  const rows = readTable(need(spec.windowsCsv, "windows.csv", spec.id),
                         ["window_start_s", "mode", "n_z_mu1", "n_z_mu2",
                          "skl_raw_bits"]);
  const summary = readSummary(need(spec.summaryJson, "summary.json", spec.id));
  const svg = new Svg(st.width, st.height);
  const x = scaleLinear()
    .domain([0, rows.length > 0 ? summary.duration_s : 1])
    .range([st.marginLeft, st.width - st.marginRight]);

  const panelHeight = (st.height - st.marginTop - st.marginBottom
                       - st.panelGap) / 2;
  const topA = st.marginTop;
  const bottomA = topA + panelHeight;

  const rates = rows.flatMap((r) => [r.n_z_mu1 / summary.window_s / 1e6,
                                     r.n_z_mu2 / summary.window_s / 1e6]);
  const yA = scaleLinear().domain(extent(rates, [0, 1]))
    .range([bottomA, topA]);
  drawAxes(svg, x, yA, { x: "", y: "detection rate [MHz]" });
  if (rows.length === 0) {
    emptyNote(svg, x, yA);
  }
  for (const m of modes(rows)) {
    const series = byMode(rows, m);
    svg.polyline(
      series.map((r) => [x(r.window_start_s),
                         yA(r.n_z_mu1 / summary.window_s / 1e6)] as const),
      MODE_COLORS[m] ?? "#444", `rate-mode-${m}-mu1`);
    svg.polyline(
      series.map((r) => [x(r.window_start_s),
                         yA(r.n_z_mu2 / summary.window_s / 1e6)] as const),
      DECOY_COLORS[m] ?? "#999", `rate-mode-${m}-mu2`);
  }

  const topB = bottomA + st.panelGap;
  const bottomB = topB + panelHeight;
  skrPanel(svg, rows, summary, x, topB, bottomB);
  provenance(svg, summary, st);
  return svg.render();
}

function renderSkrVsTimeDecoy(spec: FigureSpec): string {
  const st = style(spec);
  const rows = readTable(need(spec.windowsCsv, "windows.csv", spec.id),
                         ["window_start_s", "mode", "skl_raw_bits"]);
  const summary = readSummary(need(spec.summaryJson, "summary.json", spec.id));
  const svg = new Svg(st.width, st.height);
  const x = scaleLinear()
    .domain([0, rows.length > 0 ? summary.duration_s : 1])
    .range([st.marginLeft, st.width - st.marginRight]);
  skrPanel(svg, rows, summary, x, st.marginTop, st.height - st.marginBottom);
  provenance(svg, summary, st);
  return svg.render();
}

function renderSkrVsLoss(spec: FigureSpec): string {
  const st = style(spec);
  const rows = readTable(need(spec.sweepCsv, "sweep.csv", spec.id),
                         ["loss_db", "skr_mode1_bps", "skr_mode2_bps",
                          "skr_total_bps"]);
  const summary = readSummary(need(spec.summaryJson, "summary.json", spec.id));
  const svg = new Svg(st.width, st.height);
  const x = scaleLinear()
    .domain(extent(rows.map((r) => r.loss_db), [0, 1], 0.02))
    .range([st.marginLeft, st.width - st.marginRight]);
  const values = rows.flatMap((r) =>
    [r.skr_mode1_bps, r.skr_mode2_bps, r.skr_total_bps]);
  const y = scaleLinear()
    .domain(extent(values.map((v) => v / 1e6), [0, 1]))
    .range([st.height - st.marginBottom, st.marginTop]);
  drawAxes(svg, x, y, { x: "channel loss [dB]", y: "SKR [Mbps]" });
  if (rows.length === 0) {
    emptyNote(svg, x, y);
  }
  const series: Array<[string, (r: Row) => number, string]> = [
    ["skr-total", (r) => r.skr_total_bps, "#222"],
    ["skr-mode-1", (r) => r.skr_mode1_bps, MODE_COLORS[1]],
    ["skr-mode-2", (r) => r.skr_mode2_bps, MODE_COLORS[2]],
  ];
  for (const [cls, pick, color] of series) {
    svg.polyline(
      rows.map((r) => [x(r.loss_db), y(pick(r) / 1e6)] as const),
      color, cls);
  }
  const mark = rows.find((r) => r.loss_db === 5.0);
  if (mark !== undefined) {
    for (const [cls, pick, color] of series) {
      svg.circle(x(mark.loss_db), y(pick(mark) / 1e6), 3.5, color,
                 `marker-5db-${cls}`);
    }
  }
  provenance(svg, summary, st);
  return svg.render();
}

const RENDERERS: Record<FigureId, (spec: FigureSpec) => string> = {
  qber_vs_time: renderQberVsTime,
  det_rate_and_skr_vs_time: renderDetRateAndSkr,
  skr_vs_time_decoy: renderSkrVsTimeDecoy,
  skr_vs_loss: renderSkrVsLoss,
};

export function renderFigureToString(spec: FigureSpec): string {
  return RENDERERS[spec.id](spec);
}

/** Render one figure and write it to spec.output; returns the path. */
export function renderFigure(spec: FigureSpec): string {
  const svg = renderFigureToString(spec);
  mkdirSync(dirname(spec.output), { recursive: true });
  writeFileSync(spec.output, svg, "utf8");
  return spec.output;
}
