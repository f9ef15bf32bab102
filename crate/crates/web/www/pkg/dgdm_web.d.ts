/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Min-max normalized attention map, upsampled, as grayscale.
     */
    attention_rgba(): Uint8Array;
    class_name(): string;
    /**
     * The image with erased feature cells blacked out.
     */
    drop_mask_rgba(delta_l: number, delta_h: number, block_high: number, block_low: number, use_low: boolean): Uint8Array;
    /**
     * Fraction of feature cells erased by the same settings.
     */
    dropped_fraction(delta_l: number, delta_h: number, block_high: number, block_low: number, use_low: boolean): number;
    /**
     * `[x_min, y_min, x_max, y_max]` of the first ground-truth box.
     */
    ground_truth(): Uint32Array;
    height(): number;
    image_rgba(): Uint8Array;
    /**
     * Sigmoid importance map, upsampled, as grayscale.
     */
    importance_rgba(): Uint8Array;
    /**
     * `[x_min, y_min, x_max, y_max, iou]` of the box thresholded at
     * `threshold` times the attention maximum.
     */
    localize(threshold: number): Float64Array;
    /**
     * Builds the demo on one synthetic image of class `class` (0..3).
     */
    constructor(seed: bigint, _class: number, size: number);
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_attention_rgba: (a: number) => [number, number];
    readonly demo_class_name: (a: number) => [number, number];
    readonly demo_drop_mask_rgba: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_dropped_fraction: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly demo_ground_truth: (a: number) => [number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_image_rgba: (a: number) => [number, number];
    readonly demo_importance_rgba: (a: number) => [number, number];
    readonly demo_localize: (a: number, b: number) => [number, number];
    readonly demo_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly demo_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
