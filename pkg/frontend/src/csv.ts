/**
 * Minimal CSV reading for the cmfa result schemas.
 *
 * The engine writes unquoted comma-separated files, so a plain split is
 * exact; a stray quote or embedded comma in a label would have broken the
 * writer first.
 */

import * as fs from 'fs';

export interface Table {
  columns: string[];
  rows: Record<string, string>[];
}

export function readCsv(path: string): Table {
  const text = fs.readFileSync(path, 'utf8').replace(/\r\n/g, '\n');
  const lines = text.split('\n').filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new Error(`${path}: empty file`);
  }
  const columns = lines[0].split(',');
  const rows = lines.slice(1).map((line) => {
    const parts = line.split(',');
    const row: Record<string, string> = {};
    columns.forEach((c, i) => {
      row[c] = parts[i] ?? '';
    });
    return row;
  });
  return { columns, rows };
}

export function requireColumns(table: Table, needed: string[], path: string): void {
  const missing = needed.filter((c) => !table.columns.includes(c));
  if (missing.length > 0) {
    throw new Error(`${path}: missing required columns: ${missing.join(', ')}`);
  }
}

export function num(row: Record<string, string>, col: string): number {
  const v = Number(row[col]);
  if (!Number.isFinite(v)) {
    throw new Error(`non-numeric value '${row[col]}' in column ${col}`);
  }
  return v;
}
