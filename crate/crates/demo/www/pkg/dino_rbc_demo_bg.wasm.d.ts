/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_centeringview_free: (a: number, b: number) => void;
export const centerBatch: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
export const centeringview_argmax_counts: (a: number) => [number, number];
export const centeringview_deviation: (a: number) => number;
export const centeringview_marginals: (a: number) => [number, number];
export const centeringview_mean_entropy: (a: number) => number;
export const centeringview_row_entropy: (a: number) => number;
export const className: (a: number) => [number, number];
export const fieldSize: () => number;
export const mapSize: () => number;
export const pcaMap: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const renderField: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
