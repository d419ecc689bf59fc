/* tslint:disable */
/* eslint-disable */

/**
 * Mean episode reward per iteration of the reference A2C trainer (NaN
 * before the first finished episode).
 */
export function a2c_curve(n_states: number, workers: number, lr: number, iters: number, seed: bigint): Float64Array;

/**
 * Empirical sampling frequency of each item after `draws` draws, followed
 * by the target `p^alpha / sum p^alpha` for each item.
 */
export function replay_frequencies(priorities: Float64Array, alpha: number, draws: number, seed: bigint): Float64Array;

/**
 * Child index chosen at each of the first `pulls` steps of a weighted union.
 */
export function union_schedule(weights: Float64Array, pulls: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly a2c_curve: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly replay_frequencies: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly union_schedule: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
