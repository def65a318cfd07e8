/* tslint:disable */
/* eslint-disable */

/**
 * Ranking metrics at every list length up to `max_m`.
 *
 * One record per line: `ranked, candidates | true, answers`.
 */
export function ranking_metrics(records: string, max_m: number): string;

/**
 * Finds the `per_query` history events most similar to each query among
 * those strictly before `at`.
 *
 * `history` has one `time text` pair per line; `queries` has one text per line.
 */
export function retrieve_history(history: string, queries: string, per_query: number, at: number): string;

/**
 * Simulates a Hawkes process on `[0, horizon)` and samples its intensity.
 *
 * `params` is `{"mu": [..], "alpha": [[..], ..], "delta": [..]}`.
 */
export function simulate_hawkes(params: string, horizon: number, seed: number, grid: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly ranking_metrics: (a: number, b: number, c: number) => [number, number, number, number];
    readonly retrieve_history: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly simulate_hawkes: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
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
