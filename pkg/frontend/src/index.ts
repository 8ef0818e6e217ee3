/**
 * Batch figure rendering from cmfa result CSVs.
 *
 * Usage:
 *   cmfa-render --kind bands --input probabilities.csv --out fig.svg [--unit U]
 *   cmfa-render --spec render_spec.json
 *
 * The spec file form holds one JSON object (or an array of them) with the
 * same fields as the flags.  Output format follows the --out extension:
 * .svg or .pdf (vector only; rendering is byte-stable across runs).
 */

import * as fs from 'fs';
import * as path from 'path';
import { toPdf, toSvg } from './draw.js';
import { PlotSpec, render } from './figures.js';

interface Job extends PlotSpec {
  out: string;
}

function parseArgs(argv: string[]): Job[] {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith('--') || i + 1 >= argv.length) {
      throw new Error(`malformed arguments near '${key}'; flags take one value each`);
    }
    flags.set(key.slice(2), argv[i + 1]);
  }
  if (flags.has('spec')) {
    const raw = JSON.parse(fs.readFileSync(flags.get('spec')!, 'utf8'));
    const jobs: Job[] = Array.isArray(raw) ? raw : [raw];
    for (const j of jobs) {
      if (!j.kind || !j.input || !j.out) {
        throw new Error('each spec entry needs kind, input and out');
      }
    }
    return jobs;
  }
  const need = (k: string): string => {
    const v = flags.get(k);
    if (!v) throw new Error(`missing required flag --${k}`);
    return v;
  };
  const job: Job = {
    kind: need('kind') as Job['kind'],
    input: need('input'),
    out: need('out'),
  };
  for (const k of ['unit', 'outcome', 'estimand', 'analysis', 'scenario'] as const) {
    if (flags.has(k)) job[k] = flags.get(k) as Job[typeof k];
  }
  if (flags.has('width')) job.width = Number(flags.get('width'));
  if (flags.has('height')) job.height = Number(flags.get('height'));
  if (flags.has('magnitudes')) {
    job.magnitudes = JSON.parse(flags.get('magnitudes')!);
  }
  return [job];
}

export function renderToFile(job: Job): void {
  const fig = render(job);
  const ext = path.extname(job.out).toLowerCase();
  if (ext === '.svg') {
    fs.writeFileSync(job.out, toSvg(fig), 'utf8');
  } else if (ext === '.pdf') {
    fs.writeFileSync(job.out, toPdf(fig));
  } else {
    throw new Error(`unsupported output format '${ext}': use .svg or .pdf (vector only)`);
  }
}

export function main(argv: string[]): number {
  let jobs: Job[];
  try {
    jobs = parseArgs(argv);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    console.error('usage: cmfa-render --kind <bands|scatter|ranks|caterpillar|power|heatmap> ' +
      '--input <csv> --out <file.svg|file.pdf> [--unit U] [--outcome O] ' +
      '[--estimand E] [--analysis A] [--scenario S] | --spec <jobs.json>');
    return 1;
  }
  for (const job of jobs) {
    try {
      renderToFile(job);
      console.log(`wrote ${job.out}`);
    } catch (err) {
      console.error(`error rendering ${job.kind}: ${(err as Error).message}`);
      return 1;
    }
  }
  return 0;
}

const invoked = process.argv[1] ? path.resolve(process.argv[1]) : '';
if (invoked && import.meta.url === `file://${invoked}`) {
  process.exit(main(process.argv.slice(2)));
}
