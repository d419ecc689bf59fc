/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const a2c_curve: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const replay_frequencies: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const union_schedule: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
