/**
 * Figure drawing primitives: a display list of vector shapes plus the two
 * deterministic backends (SVG and a minimal vector-only PDF).
 *
 * Every coordinate is formatted with a fixed precision, no timestamps or
 * generated ids are emitted, and object ordering is the insertion order, so
 * rendering the same spec twice produces byte-identical files.
 */

export type Shape =
  | { kind: 'line'; x1: number; y1: number; x2: number; y2: number; stroke: string; width: number; dash?: number[] }
  | { kind: 'polyline'; pts: [number, number][]; stroke: string; width: number; dash?: number[] }
  | { kind: 'polygon'; pts: [number, number][]; fill: string; opacity?: number }
  | { kind: 'rect'; x: number; y: number; w: number; h: number; fill: string; opacity?: number }
  | { kind: 'circle'; cx: number; cy: number; r: number; fill: string; opacity?: number }
  | { kind: 'text'; x: number; y: number; text: string; size: number; anchor: 'start' | 'middle' | 'end'; rotate?: number };

export interface Figure {
  width: number;
  height: number;
  shapes: Shape[];
}

const f = (v: number): string => {
  const s = v.toFixed(2);
  return s === '-0.00' ? '0.00' : s;
};

// palette shared by all figure kinds
export const COLORS = {
  untreated: '#c23b22',
  treated: '#2066a8',
  accent: '#2a9d8f',
  neutral: '#777777',
  grid: '#dddddd',
  series: ['#2066a8', '#c23b22', '#2a9d8f', '#e9c46a', '#9467bd', '#8c564b'],
};

// ---------------------------------------------------------------------------
// SVG backend
// ---------------------------------------------------------------------------

const esc = (s: string): string =>
  s.replace(/&/g, '&amp;').replace(/</g, '&lt;').replace(/>/g, '&gt;');

function svgShape(s: Shape): string {
  switch (s.kind) {
    case 'line': {
      const dash = s.dash ? ` stroke-dasharray="${s.dash.map(f).join(' ')}"` : '';
      return `<line x1="${f(s.x1)}" y1="${f(s.y1)}" x2="${f(s.x2)}" y2="${f(s.y2)}" stroke="${s.stroke}" stroke-width="${f(s.width)}"${dash}/>`;
    }
    case 'polyline': {
      const dash = s.dash ? ` stroke-dasharray="${s.dash.map(f).join(' ')}"` : '';
      const pts = s.pts.map(([x, y]) => `${f(x)},${f(y)}`).join(' ');
      return `<polyline points="${pts}" fill="none" stroke="${s.stroke}" stroke-width="${f(s.width)}"${dash}/>`;
    }
    case 'polygon': {
      const pts = s.pts.map(([x, y]) => `${f(x)},${f(y)}`).join(' ');
      const op = s.opacity !== undefined ? ` fill-opacity="${f(s.opacity)}"` : '';
      return `<polygon points="${pts}" fill="${s.fill}"${op} stroke="none"/>`;
    }
    case 'rect': {
      const op = s.opacity !== undefined ? ` fill-opacity="${f(s.opacity)}"` : '';
      return `<rect x="${f(s.x)}" y="${f(s.y)}" width="${f(s.w)}" height="${f(s.h)}" fill="${s.fill}"${op}/>`;
    }
    case 'circle': {
      const op = s.opacity !== undefined ? ` fill-opacity="${f(s.opacity)}"` : '';
      return `<circle cx="${f(s.cx)}" cy="${f(s.cy)}" r="${f(s.r)}" fill="${s.fill}"${op}/>`;
    }
    case 'text': {
      const rot = s.rotate ? ` transform="rotate(${f(s.rotate)} ${f(s.x)} ${f(s.y)})"` : '';
      return `<text x="${f(s.x)}" y="${f(s.y)}" font-size="${f(s.size)}" font-family="Helvetica, Arial, sans-serif" text-anchor="${s.anchor}"${rot}>${esc(s.text)}</text>`;
    }
  }
}

export function toSvg(fig: Figure): string {
  const body = fig.shapes.map(svgShape).join('\n');
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${fig.width}" height="${fig.height}" ` +
    `viewBox="0 0 ${fig.width} ${fig.height}">\n` +
    `<rect x="0" y="0" width="${fig.width}" height="${fig.height}" fill="#ffffff"/>\n` +
    body +
    '\n</svg>\n'
  );
}

// ---------------------------------------------------------------------------
// PDF backend (vector only, Helvetica, no compression, fixed metadata)
// ---------------------------------------------------------------------------

function pdfColor(hex: string): string {
  const h = hex.replace('#', '');
  const r = parseInt(h.slice(0, 2), 16) / 255;
  const g = parseInt(h.slice(2, 4), 16) / 255;
  const b = parseInt(h.slice(4, 6), 16) / 255;
  return `${r.toFixed(3)} ${g.toFixed(3)} ${b.toFixed(3)}`;
}

function pdfEsc(s: string): string {
  return s.replace(/\\/g, '\\\\').replace(/\(/g, '\\(').replace(/\)/g, '\\)');
}

function pdfShape(s: Shape, H: number): string {
  // PDF's y axis points up; figures are authored with y down
  const Y = (y: number) => f(H - y);
  switch (s.kind) {
    case 'line': {
      const dash = s.dash ? `[${s.dash.map(f).join(' ')}] 0 d\n` : '[] 0 d\n';
      return `${dash}${pdfColor(s.stroke)} RG ${f(s.width)} w\n` +
        `${f(s.x1)} ${Y(s.y1)} m ${f(s.x2)} ${Y(s.y2)} l S\n`;
    }
    case 'polyline': {
      const dash = s.dash ? `[${s.dash.map(f).join(' ')}] 0 d\n` : '[] 0 d\n';
      const [first, ...rest] = s.pts;
      return `${dash}${pdfColor(s.stroke)} RG ${f(s.width)} w\n` +
        `${f(first[0])} ${Y(first[1])} m ` +
        rest.map(([x, y]) => `${f(x)} ${Y(y)} l`).join(' ') + ' S\n';
    }
    case 'polygon': {
      const [first, ...rest] = s.pts;
      const alpha = s.opacity !== undefined ? `/GS${Math.round((s.opacity ?? 1) * 100)} gs\n` : '';
      return `${alpha}${pdfColor(s.fill)} rg\n` +
        `${f(first[0])} ${Y(first[1])} m ` +
        rest.map(([x, y]) => `${f(x)} ${Y(y)} l`).join(' ') + ' h f\n' +
        (s.opacity !== undefined ? '/GS100 gs\n' : '');
    }
    case 'rect': {
      const alpha = s.opacity !== undefined ? `/GS${Math.round((s.opacity ?? 1) * 100)} gs\n` : '';
      return `${alpha}${pdfColor(s.fill)} rg ${f(s.x)} ${f(H - s.y - s.h)} ${f(s.w)} ${f(s.h)} re f\n` +
        (s.opacity !== undefined ? '/GS100 gs\n' : '');
    }
    case 'circle': {
      // four-arc Bezier approximation
      const k = 0.5523 * s.r;
      const { cx, r } = s;
      const cy = H - s.cy;
      const alpha = s.opacity !== undefined ? `/GS${Math.round((s.opacity ?? 1) * 100)} gs\n` : '';
      return `${alpha}${pdfColor(s.fill)} rg\n` +
        `${f(cx + r)} ${f(cy)} m\n` +
        `${f(cx + r)} ${f(cy + k)} ${f(cx + k)} ${f(cy + r)} ${f(cx)} ${f(cy + r)} c\n` +
        `${f(cx - k)} ${f(cy + r)} ${f(cx - r)} ${f(cy + k)} ${f(cx - r)} ${f(cy)} c\n` +
        `${f(cx - r)} ${f(cy - k)} ${f(cx - k)} ${f(cy - r)} ${f(cx)} ${f(cy - r)} c\n` +
        `${f(cx + k)} ${f(cy - r)} ${f(cx + r)} ${f(cy - k)} ${f(cx + r)} ${f(cy)} c\n` +
        `f\n` + (s.opacity !== undefined ? '/GS100 gs\n' : '');
    }
    case 'text': {
      let pos = `${f(s.x)} ${Y(s.y)}`;
      // PDF lacks text anchoring; approximate with a Helvetica advance of
      // 0.51 em per character, which matches the SVG layout closely enough
      const width = s.text.length * s.size * 0.51;
      let x = s.x;
      if (s.anchor === 'middle') x -= width / 2;
      if (s.anchor === 'end') x -= width;
      const rot = s.rotate
        ? (() => {
            const th = (-s.rotate * Math.PI) / 180;
            const c = Math.cos(th), si = Math.sin(th);
            return `${f(c)} ${f(si)} ${f(-si)} ${f(c)} ${f(s.x)} ${Y(s.y)} Tm`;
          })()
        : `1 0 0 1 ${f(x)} ${Y(s.y)} Tm`;
      return `BT /F1 ${f(s.size)} Tf 0 0 0 rg ${rot} (${pdfEsc(s.text)}) Tj ET\n`;
    }
  }
}

export function toPdf(fig: Figure): Buffer {
  const H = fig.height;
  let content = `1 1 1 rg 0 0 ${f(fig.width)} ${f(H)} re f\n`;
  for (const s of fig.shapes) {
    content += pdfShape(s, H);
  }
  const alphas = new Set<number>([100]);
  for (const s of fig.shapes) {
    if ('opacity' in s && s.opacity !== undefined) alphas.add(Math.round(s.opacity * 100));
  }
  const gsEntries = [...alphas].sort((a, b) => a - b)
    .map((a) => `/GS${a} << /Type /ExtGState /ca ${(a / 100).toFixed(2)} >>`)
    .join(' ');

  const objects: string[] = [];
  objects.push('<< /Type /Catalog /Pages 2 0 R >>');
  objects.push('<< /Type /Pages /Kids [3 0 R] /Count 1 >>');
  objects.push(
    `<< /Type /Page /Parent 2 0 R /MediaBox [0 0 ${f(fig.width)} ${f(H)}] ` +
    `/Contents 4 0 R /Resources << /Font << /F1 5 0 R >> /ExtGState << ${gsEntries} >> >> >>`);
  objects.push(`<< /Length ${Buffer.byteLength(content)} >>\nstream\n${content}endstream`);
  objects.push('<< /Type /Font /Subtype /Type1 /BaseFont /Helvetica >>');

  let pdf = '%PDF-1.4\n';
  const offsets: number[] = [];
  objects.forEach((obj, i) => {
    offsets.push(Buffer.byteLength(pdf));
    pdf += `${i + 1} 0 obj\n${obj}\nendobj\n`;
  });
  const xref = Buffer.byteLength(pdf);
  pdf += `xref\n0 ${objects.length + 1}\n0000000000 65535 f \n`;
  for (const off of offsets) {
    pdf += `${off.toString().padStart(10, '0')} 00000 n \n`;
  }
  pdf += `trailer\n<< /Size ${objects.length + 1} /Root 1 0 R >>\nstartxref\n${xref}\n%%EOF\n`;
  return Buffer.from(pdf, 'latin1');
}
