/* tslint:disable */
/* eslint-disable */

/**
 * Outcome of centering one batch of teacher logits.
 */
export class CenteringView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * How many rows pick each prototype as their top choice.
     */
    argmax_counts(): Uint32Array;
    /**
     * Largest `|marginal − 1/K|`.
     */
    deviation(): number;
    /**
     * Batch-mean probability of every prototype.
     */
    marginals(): Float64Array;
    /**
     * Entropy of the batch-mean assignment; `ln K` when balanced, 0 when collapsed.
     */
    mean_entropy(): number;
    /**
     * Average per-row entropy (how confident each target is).
     */
    row_entropy(): number;
}

export function centerBatch(seed: number, mode: string, batch: number, k: number, alignment: number, tau: number, sinkhorn_iters: number, rounds: number): CenteringView;

export function className(_class: number): string;

export function fieldSize(): number;

export function mapSize(): number;

export function pcaMap(field_seed: number, _class: number, source: number, encoder_seed: number): Uint8Array;

export function renderField(seed: number, _class: number, source: number, show_overlay: boolean): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_centeringview_free: (a: number, b: number) => void;
    readonly centerBatch: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
    readonly centeringview_argmax_counts: (a: number) => [number, number];
    readonly centeringview_deviation: (a: number) => number;
    readonly centeringview_marginals: (a: number) => [number, number];
    readonly centeringview_mean_entropy: (a: number) => number;
    readonly centeringview_row_entropy: (a: number) => number;
    readonly className: (a: number) => [number, number];
    readonly fieldSize: () => number;
    readonly mapSize: () => number;
    readonly pcaMap: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly renderField: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
