/**
 * The five figure kinds rendered from the engine's result CSVs:
 *
 *  bands        credible bands of the untreated vs treated success
 *               probability for one unit over time        (probabilities.csv)
 *  scatter      posterior-mean unit-time effects over time, one unit
 *               highlighted                               (effects_unit_time.csv)
 *  ranks        scaled-rank trajectory with credible band for one unit
 *                                                         (ranks.csv)
 *  caterpillar  sorted unit-level effects with 95% whiskers
 *                                                         (effects_unit.csv)
 *  power        detection rate vs effect magnitude, one line per analysis
 *                                                         (study metrics.csv)
 *  heatmap      CI width / detection over pre-treatment history cells
 *                                                         (study heatmaps.csv)
 */

import { num, readCsv, requireColumns, Table } from './csv.js';
import { COLORS, Figure, Shape } from './draw.js';
import { linearScale, padDomain, Scale, tickLabel, ticks } from './scale.js';

export interface PlotSpec {
  kind: 'bands' | 'scatter' | 'ranks' | 'caterpillar' | 'power' | 'heatmap';
  input: string;
  unit?: string;
  outcome?: string;
  estimand?: string;
  analysis?: string;
  scenario?: string;
  magnitudes?: Record<string, number>; // effect level -> magnitude, for power
  width?: number;
  height?: number;
}

const MARGIN = { left: 58, right: 16, top: 30, bottom: 42 };

function frame(width: number, height: number, title: string,
               xLab: string, yLab: string,
               xs: Scale, ys: Scale): Shape[] {
  const shapes: Shape[] = [];
  const [x0, x1] = xs.range;
  const [y1, y0] = ys.range; // ys maps up
  for (const t of ticks(xs.domain)) {
    shapes.push({ kind: 'line', x1: xs(t), y1: y0, x2: xs(t), y2: y1, stroke: COLORS.grid, width: 0.5 });
    shapes.push({ kind: 'text', x: xs(t), y: y1 + 16, text: tickLabel(t), size: 10, anchor: 'middle' });
  }
  for (const t of ticks(ys.domain)) {
    shapes.push({ kind: 'line', x1: x0, y1: ys(t), x2: x1, y2: ys(t), stroke: COLORS.grid, width: 0.5 });
    shapes.push({ kind: 'text', x: x0 - 6, y: ys(t) + 3.5, text: tickLabel(t), size: 10, anchor: 'end' });
  }
  shapes.push({ kind: 'line', x1: x0, y1: y1, x2: x1, y2: y1, stroke: '#000000', width: 1 });
  shapes.push({ kind: 'line', x1: x0, y1: y0, x2: x0, y2: y1, stroke: '#000000', width: 1 });
  shapes.push({ kind: 'text', x: (x0 + x1) / 2, y: 16, text: title, size: 12, anchor: 'middle' });
  shapes.push({ kind: 'text', x: (x0 + x1) / 2, y: y1 + 32, text: xLab, size: 11, anchor: 'middle' });
  shapes.push({ kind: 'text', x: 14, y: (y0 + y1) / 2, text: yLab, size: 11, anchor: 'middle', rotate: -90 });
  return shapes;
}

function bandPolygon(xs: Scale, ys: Scale, pts: { x: number; lo: number; hi: number }[],
                     fill: string): Shape {
  const upper: [number, number][] = pts.map((p) => [xs(p.x), ys(p.hi)]);
  const lower: [number, number][] = [...pts].reverse().map((p) => [xs(p.x), ys(p.lo)]);
  return { kind: 'polygon', pts: [...upper, ...lower], fill, opacity: 0.25 };
}

function pickUnit(table: Table, spec: PlotSpec, path: string): string {
  if (spec.unit) return spec.unit;
  const units = [...new Set(table.rows.map((r) => r.unit))].sort();
  if (units.length === 0) throw new Error(`${path}: no units in input`);
  return units[0];
}

// ---------------------------------------------------------------------------

export function renderBands(spec: PlotSpec): Figure {
  const table = readCsv(spec.input);
  requireColumns(table, ['unit', 'time', 'outcome', 'p0_mean', 'p0_lo95', 'p0_hi95',
                         'pT_mean', 'pT_lo95', 'pT_hi95'], spec.input);
  const unit = pickUnit(table, spec, spec.input);
  let rows = table.rows.filter((r) => r.unit === unit && (r.valid ?? 'True') !== 'False');
  if (spec.outcome) rows = rows.filter((r) => r.outcome === spec.outcome);
  if (rows.length === 0) throw new Error(`no probability rows for unit ${unit}`);
  rows.sort((a, b) => num(a, 'time') - num(b, 'time'));

  const width = spec.width ?? 560;
  const height = spec.height ?? 360;
  const xs = linearScale(padDomain(rows.map((r) => num(r, 'time')), 0.02),
                         [MARGIN.left, width - MARGIN.right]);
  const ys = linearScale([0, 1], [height - MARGIN.bottom, MARGIN.top]);
  const shapes = frame(width, height, `success probability, unit ${unit}`,
                       'period', 'probability', xs, ys);

  const p0 = rows.map((r) => ({ x: num(r, 'time'), lo: num(r, 'p0_lo95'), hi: num(r, 'p0_hi95') }));
  const pT = rows.map((r) => ({ x: num(r, 'time'), lo: num(r, 'pT_lo95'), hi: num(r, 'pT_hi95') }));
  shapes.push(bandPolygon(xs, ys, p0, COLORS.untreated));
  shapes.push(bandPolygon(xs, ys, pT, COLORS.treated));
  shapes.push({ kind: 'polyline', stroke: COLORS.untreated, width: 1.5,
                pts: rows.map((r) => [xs(num(r, 'time')), ys(num(r, 'p0_mean'))]) });
  shapes.push({ kind: 'polyline', stroke: COLORS.treated, width: 1.5,
                pts: rows.map((r) => [xs(num(r, 'time')), ys(num(r, 'pT_mean'))]) });
  shapes.push({ kind: 'text', x: width - MARGIN.right, y: MARGIN.top + 2,
                text: 'untreated (counterfactual)', size: 10, anchor: 'end' });
  shapes.push({ kind: 'circle', cx: width - MARGIN.right - 132, cy: MARGIN.top - 1, r: 4, fill: COLORS.untreated });
  shapes.push({ kind: 'text', x: width - MARGIN.right, y: MARGIN.top + 16,
                text: 'treated (observed cell)', size: 10, anchor: 'end' });
  shapes.push({ kind: 'circle', cx: width - MARGIN.right - 112, cy: MARGIN.top + 13, r: 4, fill: COLORS.treated });
  return { width, height, shapes };
}

export function renderScatter(spec: PlotSpec): Figure {
  const table = readCsv(spec.input);
  requireColumns(table, ['unit', 'time', 'outcome', 'estimand', 'mean'], spec.input);
  const estimand = spec.estimand ?? 'beta';
  let rows = table.rows.filter((r) => r.estimand === estimand);
  if (spec.outcome) rows = rows.filter((r) => r.outcome === spec.outcome);
  if (rows.length === 0) throw new Error(`no unit-time rows for estimand ${estimand}`);
  const unit = pickUnit({ ...table, rows }, spec, spec.input);

  const width = spec.width ?? 560;
  const height = spec.height ?? 360;
  const xs = linearScale(padDomain(rows.map((r) => num(r, 'time')), 0.02),
                         [MARGIN.left, width - MARGIN.right]);
  const ys = linearScale(padDomain(rows.map((r) => num(r, 'mean'))),
                         [height - MARGIN.bottom, MARGIN.top]);
  const shapes = frame(width, height, `unit-time effects (${estimand})`,
                       'period', 'posterior mean effect', xs, ys);
  if (ys.domain[0] < 0 && ys.domain[1] > 0) {
    shapes.push({ kind: 'line', x1: xs.range[0], y1: ys(0), x2: xs.range[1], y2: ys(0),
                  stroke: '#000000', width: 0.75, dash: [4, 3] });
  }
  for (const r of rows) {
    if (r.unit === unit) continue;
    shapes.push({ kind: 'circle', cx: xs(num(r, 'time')), cy: ys(num(r, 'mean')),
                  r: 2, fill: COLORS.neutral, opacity: 0.35 });
  }
  for (const r of rows.filter((x) => x.unit === unit)) {
    shapes.push({ kind: 'circle', cx: xs(num(r, 'time')), cy: ys(num(r, 'mean')),
                  r: 3, fill: COLORS.untreated });
  }
  shapes.push({ kind: 'text', x: width - MARGIN.right, y: MARGIN.top + 2,
                text: `highlighted unit: ${unit}`, size: 10, anchor: 'end' });
  return { width, height, shapes };
}

export function renderRanks(spec: PlotSpec): Figure {
  const table = readCsv(spec.input);
  requireColumns(table, ['level', 'unit', 'time', 'outcome', 'estimand',
                         'mean', 'lo95', 'hi95'], spec.input);
  const estimand = spec.estimand ?? 'rank_beta';
  let rows = table.rows.filter((r) => r.level === 'unit_time' && r.estimand === estimand);
  if (spec.outcome) rows = rows.filter((r) => r.outcome === spec.outcome);
  if (rows.length === 0) throw new Error(`no rank trajectories for estimand ${estimand}`);
  const unit = pickUnit({ ...table, rows }, spec, spec.input);
  rows = rows.filter((r) => r.unit === unit);
  rows.sort((a, b) => num(a, 'time') - num(b, 'time'));

  const width = spec.width ?? 560;
  const height = spec.height ?? 360;
  const xs = linearScale(padDomain(rows.map((r) => num(r, 'time')), 0.02),
                         [MARGIN.left, width - MARGIN.right]);
  const ys = linearScale([0, 1], [height - MARGIN.bottom, MARGIN.top]);
  const shapes = frame(width, height, `${estimand} trajectory, unit ${unit}`,
                       'period', 'scaled rank', xs, ys);
  shapes.push({ kind: 'line', x1: xs.range[0], y1: ys(0.5), x2: xs.range[1], y2: ys(0.5),
                stroke: '#000000', width: 0.75, dash: [4, 3] });
  shapes.push(bandPolygon(xs, ys, rows.map((r) => ({
    x: num(r, 'time'), lo: num(r, 'lo95'), hi: num(r, 'hi95') })), COLORS.accent));
  shapes.push({ kind: 'polyline', stroke: COLORS.accent, width: 1.5,
                pts: rows.map((r) => [xs(num(r, 'time')), ys(num(r, 'mean'))]) });
  return { width, height, shapes };
}

export function renderCaterpillar(spec: PlotSpec): Figure {
  const table = readCsv(spec.input);
  requireColumns(table, ['unit', 'outcome', 'estimand', 'mean', 'lo95', 'hi95'], spec.input);
  const estimand = spec.estimand ?? 'beta';
  let rows = table.rows.filter((r) => r.estimand === estimand);
  if (spec.outcome) rows = rows.filter((r) => r.outcome === spec.outcome);
  if (rows.length === 0) throw new Error(`no unit-level rows for estimand ${estimand}`);
  rows.sort((a, b) => num(a, 'mean') - num(b, 'mean') || (a.unit < b.unit ? -1 : 1));

  const width = spec.width ?? 560;
  const height = spec.height ?? Math.max(240, 48 + rows.length * 14);
  const ys = linearScale([-0.5, rows.length - 0.5],
                         [height - MARGIN.bottom, MARGIN.top]);
  const vals = rows.flatMap((r) => [num(r, 'lo95'), num(r, 'hi95')]);
  const xs = linearScale(padDomain(vals), [MARGIN.left + 30, width - MARGIN.right]);

  const shapes: Shape[] = [];
  shapes.push({ kind: 'text', x: (xs.range[0] + xs.range[1]) / 2, y: 16,
                text: `unit effects (${estimand}), sorted`, size: 12, anchor: 'middle' });
  for (const t of ticks(xs.domain)) {
    shapes.push({ kind: 'line', x1: xs(t), y1: ys.range[1], x2: xs(t), y2: ys.range[0],
                  stroke: COLORS.grid, width: 0.5 });
    shapes.push({ kind: 'text', x: xs(t), y: ys.range[0] + 16, text: tickLabel(t),
                  size: 10, anchor: 'middle' });
  }
  if (xs.domain[0] < 0 && xs.domain[1] > 0) {
    shapes.push({ kind: 'line', x1: xs(0), y1: ys.range[1], x2: xs(0), y2: ys.range[0],
                  stroke: '#000000', width: 0.75, dash: [4, 3] });
  }
  rows.forEach((r, i) => {
    const y = ys(i);
    shapes.push({ kind: 'line', x1: xs(num(r, 'lo95')), y1: y, x2: xs(num(r, 'hi95')), y2: y,
                  stroke: COLORS.treated, width: 1.2 });
    shapes.push({ kind: 'circle', cx: xs(num(r, 'mean')), cy: y, r: 2.4, fill: COLORS.untreated });
    shapes.push({ kind: 'text', x: MARGIN.left + 24, y: y + 3, text: r.unit, size: 8, anchor: 'end' });
  });
  shapes.push({ kind: 'text', x: (xs.range[0] + xs.range[1]) / 2, y: ys.range[0] + 32,
                text: 'posterior mean and 95% interval', size: 11, anchor: 'middle' });
  return { width, height, shapes };
}

export function renderPower(spec: PlotSpec): Figure {
  const table = readCsv(spec.input);
  requireColumns(table, ['analysis', 'scenario', 'estimand', 'stratum',
                         'detection_rate'], spec.input);
  const estimand = spec.estimand ?? 'beta';
  const rows = table.rows.filter((r) => r.estimand === estimand && r.stratum === 'any');
  if (rows.length === 0) throw new Error(`no metric rows for estimand ${estimand}`);
  const analyses = [...new Set(rows.map((r) => r.analysis))].sort();
  const xOf = (scenario: string): number =>
    spec.magnitudes?.[scenario] !== undefined ? spec.magnitudes[scenario] : Number(scenario);

  const width = spec.width ?? 560;
  const height = spec.height ?? 360;
  const xsVals = rows.map((r) => xOf(r.scenario));
  const xs = linearScale(padDomain(xsVals, 0.04), [MARGIN.left, width - MARGIN.right]);
  const ys = linearScale([0, 1], [height - MARGIN.bottom, MARGIN.top]);
  const xLab = spec.magnitudes ? 'effect magnitude' : 'effect level';
  const shapes = frame(width, height, `detection rate (${estimand})`, xLab, 'power', xs, ys);
  shapes.push({ kind: 'line', x1: xs.range[0], y1: ys(0.05), x2: xs.range[1], y2: ys(0.05),
                stroke: '#000000', width: 0.75, dash: [4, 3] });
  analyses.forEach((analysis, ai) => {
    const series = rows.filter((r) => r.analysis === analysis)
      .sort((a, b) => xOf(a.scenario) - xOf(b.scenario));
    const color = COLORS.series[ai % COLORS.series.length];
    shapes.push({ kind: 'polyline', stroke: color, width: 1.8,
                  pts: series.map((r) => [xs(xOf(r.scenario)), ys(num(r, 'detection_rate'))]) });
    for (const r of series) {
      shapes.push({ kind: 'circle', cx: xs(xOf(r.scenario)), cy: ys(num(r, 'detection_rate')),
                    r: 3, fill: color });
    }
    shapes.push({ kind: 'text', x: width - MARGIN.right, y: MARGIN.top + 2 + 14 * ai,
                  text: analysis, size: 10, anchor: 'end' });
    shapes.push({ kind: 'circle', cx: width - MARGIN.right - 9 * analysis.length - 8,
                  cy: MARGIN.top - 1 + 14 * ai, r: 4, fill: color });
  });
  return { width, height, shapes };
}

export function renderHeatmap(spec: PlotSpec): Figure {
  const table = readCsv(spec.input);
  requireColumns(table, ['grid', 'analysis', 'scenario', 'estimand', 'last_untreated',
                         'bin_lo', 'bin_hi', 'ci_width', 'detection_rate'], spec.input);
  const estimand = spec.estimand ?? 'beta';
  const analysis = spec.analysis ?? 'mv';
  const scenario = spec.scenario ?? '1';
  const rows = table.rows.filter((r) => r.estimand === estimand
    && r.analysis === analysis && r.scenario === scenario);
  if (rows.length === 0) {
    throw new Error(`no heatmap cells for estimand=${estimand} analysis=${analysis} scenario=${scenario}`);
  }
  const metric = scenario === '1' ? 'ci_width' : 'detection_rate';
  const tis = [...new Set(rows.map((r) => num(r, 'last_untreated')))].sort((a, b) => a - b);
  const bins = [...new Set(rows.map((r) => num(r, 'bin_lo')))].sort((a, b) => a - b);

  const width = spec.width ?? 560;
  const height = spec.height ?? 360;
  const x0 = MARGIN.left;
  const y0 = MARGIN.top + 12;
  const cw = (width - MARGIN.right - x0) / bins.length;
  const ch = (height - MARGIN.bottom - y0) / tis.length;
  const vals = rows.map((r) => num(r, metric));
  const vmin = Math.min(...vals);
  const vmax = Math.max(...vals);

  const shade = (v: number): string => {
    const t = vmax > vmin ? (v - vmin) / (vmax - vmin) : 0.5;
    const r = Math.round(32 + t * (194 - 32));
    const g = Math.round(102 - t * (102 - 59));
    const b = Math.round(168 - t * (168 - 34));
    const hex = (n: number) => n.toString(16).padStart(2, '0');
    return `#${hex(r)}${hex(g)}${hex(b)}`;
  };

  const shapes: Shape[] = [];
  shapes.push({ kind: 'text', x: (x0 + width - MARGIN.right) / 2, y: 16,
                text: `${metric} by history (${analysis}, ${estimand}, scenario ${scenario})`,
                size: 12, anchor: 'middle' });
  for (const r of rows) {
    const xi = bins.indexOf(num(r, 'bin_lo'));
    const yi = tis.indexOf(num(r, 'last_untreated'));
    const v = num(r, metric);
    shapes.push({ kind: 'rect', x: x0 + xi * cw, y: y0 + yi * ch, w: cw - 1, h: ch - 1,
                  fill: shade(v) });
    shapes.push({ kind: 'text', x: x0 + xi * cw + cw / 2, y: y0 + yi * ch + ch / 2 + 3,
                  text: tickLabel(v), size: 9, anchor: 'middle' });
  }
  tis.forEach((ti, yi) => {
    shapes.push({ kind: 'text', x: x0 - 6, y: y0 + yi * ch + ch / 2 + 3,
                  text: `T=${ti}`, size: 10, anchor: 'end' });
  });
  bins.forEach((b, xi) => {
    shapes.push({ kind: 'text', x: x0 + xi * cw + cw / 2, y: height - MARGIN.bottom + 16,
                  text: `${tickLabel(b)}+`, size: 10, anchor: 'middle' });
  });
  const gridName = rows[0].grid === 'nbar' ? 'mean pre-treatment trials' : 'mean pre-treatment offsets';
  shapes.push({ kind: 'text', x: (x0 + width - MARGIN.right) / 2, y: height - MARGIN.bottom + 32,
                text: gridName, size: 11, anchor: 'middle' });
  shapes.push({ kind: 'text', x: 14, y: (y0 + height - MARGIN.bottom) / 2,
                text: 'pre-treatment periods', size: 11, anchor: 'middle', rotate: -90 });
  return { width, height, shapes };
}

export function render(spec: PlotSpec): Figure {
  switch (spec.kind) {
    case 'bands': return renderBands(spec);
    case 'scatter': return renderScatter(spec);
    case 'ranks': return renderRanks(spec);
    case 'caterpillar': return renderCaterpillar(spec);
    case 'power': return renderPower(spec);
    case 'heatmap': return renderHeatmap(spec);
    default: throw new Error(`unknown figure kind '${(spec as PlotSpec).kind}'`);
  }
}
