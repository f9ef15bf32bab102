/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_attention_rgba: (a: number) => [number, number];
export const demo_class_name: (a: number) => [number, number];
export const demo_drop_mask_rgba: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const demo_dropped_fraction: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const demo_ground_truth: (a: number) => [number, number];
export const demo_height: (a: number) => number;
export const demo_image_rgba: (a: number) => [number, number];
export const demo_importance_rgba: (a: number) => [number, number];
export const demo_localize: (a: number, b: number) => [number, number];
export const demo_new: (a: bigint, b: number, c: number) => [number, number, number];
export const demo_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
