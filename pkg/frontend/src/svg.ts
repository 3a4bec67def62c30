/**
 * Minimal deterministic SVG emission. Every number is formatted through
 * one fixed-precision formatter so identical inputs produce identical
 * bytes, which the tests rely on.
 */
import type { ScaleLinear } from "d3-scale";

export function fmt(v: number): string {
  if (!Number.isFinite(v)) return "0";
  const s = v.toPrecision(6);
  return s.includes(".") ? s.replace(/\.?0+$/, "") : s;
}

function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;");
}

export interface TextOptions {
  anchor?: "start" | "middle" | "end";
  size?: number;
  fill?: string;
  rotate?: number;
}

export class Svg {
  readonly width: number;
  readonly height: number;
  private readonly parts: string[] = [];

  constructor(width: number, height: number) {
    this.width = width;
    this.height = height;
  }

  raw(fragment: string): void {
    this.parts.push(fragment);
  }

  line(x1: number, y1: number, x2: number, y2: number, stroke: string,
       strokeWidth = 1): void {
    this.parts.push(
      `<line x1="${fmt(x1)}" y1="${fmt(y1)}" x2="${fmt(x2)}" y2="${fmt(y2)}"` +
      ` stroke="${stroke}" stroke-width="${fmt(strokeWidth)}"/>`);
  }

  polyline(points: ReadonlyArray<readonly [number, number]>, stroke: string,
           cssClass: string): void {
    const pts = points.map(([x, y]) => `${fmt(x)},${fmt(y)}`).join(" ");
    this.parts.push(
      `<polyline class="${cssClass}" points="${pts}" fill="none"` +
      ` stroke="${stroke}" stroke-width="1.5"/>`);
  }

  rect(x: number, y: number, w: number, h: number, fill: string,
       cssClass?: string): void {
    const cls = cssClass ? ` class="${cssClass}"` : "";
    this.parts.push(
      `<rect${cls} x="${fmt(x)}" y="${fmt(y)}" width="${fmt(w)}"` +
      ` height="${fmt(h)}" fill="${fill}"/>`);
  }

  circle(cx: number, cy: number, r: number, fill: string,
         cssClass?: string): void {
    const cls = cssClass ? ` class="${cssClass}"` : "";
    this.parts.push(
      `<circle${cls} cx="${fmt(cx)}" cy="${fmt(cy)}" r="${fmt(r)}"` +
      ` fill="${fill}"/>`);
  }

  text(content: string, x: number, y: number, opts: TextOptions = {}): void {
    const anchor = opts.anchor ?? "start";
    const size = opts.size ?? 11;
    const fill = opts.fill ?? "#222";
    const transform = opts.rotate !== undefined
      ? ` transform="rotate(${fmt(opts.rotate)} ${fmt(x)} ${fmt(y)})"`
      : "";
    this.parts.push(
      `<text x="${fmt(x)}" y="${fmt(y)}" text-anchor="${anchor}"` +
      ` font-size="${fmt(size)}" font-family="sans-serif"` +
      ` fill="${fill}"${transform}>${esc(content)}</text>`);
  }

  render(): string {
    return `<svg xmlns="http://www.w3.org/2000/svg" width="${this.width}"` +
      ` height="${this.height}" viewBox="0 0 ${this.width} ${this.height}">\n` +
      `<rect x="0" y="0" width="${this.width}" height="${this.height}"` +
      ` fill="white"/>\n` +
      this.parts.join("\n") + "\n</svg>\n";
  }
}

export interface AxisLabels {
  x: string;
  y: string;
}

/** Draw a left+bottom axis frame with ticks inside the given plot box. */
export function drawAxes(svg: Svg, xScale: ScaleLinear<number, number>,
                         yScale: ScaleLinear<number, number>,
                         labels: AxisLabels): void {
  const [x0, x1] = xScale.range();
  const [y0, y1] = yScale.range();   // y0 is the bottom pixel
  svg.line(x0, y0, x1, y0, "#222");
  svg.line(x0, y0, x0, y1, "#222");
  for (const t of xScale.ticks(6)) {
    const px = xScale(t);
    svg.line(px, y0, px, y0 + 4, "#222");
    svg.text(fmt(t), px, y0 + 16, { anchor: "middle", size: 10 });
  }
  for (const t of yScale.ticks(5)) {
    const py = yScale(t);
    svg.line(x0 - 4, py, x0, py, "#222");
    svg.text(fmt(t), x0 - 7, py + 3, { anchor: "end", size: 10 });
  }
  svg.text(labels.x, (x0 + x1) / 2, y0 + 32, { anchor: "middle" });
  svg.text(labels.y, x0 - 38, (y0 + y1) / 2,
           { anchor: "middle", rotate: -90 });
}
