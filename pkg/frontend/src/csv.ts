/**
 * CSV ingestion for run outputs. Tables are read verbatim: numbers are
 * parsed, "nan" becomes NaN, and nothing is aggregated here. A file with
 * a header and no rows is a valid empty table.
 */
import { readFileSync } from "node:fs";
import Papa from "papaparse";

export type Row = Record<string, number>;

export class MissingColumnsError extends Error {
  readonly file: string;
  readonly columns: readonly string[];

  constructor(file: string, columns: readonly string[]) {
    super(`${file} missing columns: ${columns.join(", ")}`);
    this.name = "MissingColumnsError";
    this.file = file;
    this.columns = columns;
  }
}

function toNumber(value: unknown): number {
  if (typeof value === "number") return value;
  if (typeof value === "string") {
    const lower = value.trim().toLowerCase();
    if (lower === "nan") return NaN;
    if (lower === "") return NaN;
    return Number(value);
  }
  return NaN;
}

/** Read a CSV with a header row; every required column must be present. */
export function readTable(path: string, required: readonly string[]): Row[] {
  const text = readFileSync(path, "utf8");
  const parsed = Papa.parse<Record<string, unknown>>(text, {
    header: true,
    skipEmptyLines: true,
  });
  const fields = parsed.meta.fields ?? [];
  const missing = required.filter((c) => !fields.includes(c));
  if (missing.length > 0) {
    throw new MissingColumnsError(path, missing);
  }
  return parsed.data.map((raw) => {
    const row: Row = {};
    for (const key of fields) row[key] = toNumber(raw[key]);
    return row;
  });
}

export interface ModeSummary {
  mode: number;
  windows: number;
  total_secret_bits: number;
  mean_skr_bps: number;
  std_skr_bps: number;
  negative_windows: number;
  infeasible_windows: number;
  short_windows: number;
  pooled_qber_z: number | null;
  pooled_qber_x: number | null;
}

export interface RunSummary {
  acquisition: string;
  block_size: number;
  duration_s: number;
  window_s: number;
  seed: number;
  scenario_digest: string;
  total_skr_bps: number;
  std_total_skr_bps: number;
  modes: Record<string, ModeSummary>;
}

/** Read a run's summary.json; used for annotations and provenance only. */
export function readSummary(path: string): RunSummary {
  return JSON.parse(readFileSync(path, "utf8")) as RunSummary;
}
