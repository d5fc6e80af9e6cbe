/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    anchor_count(): number;
    dssim_rgba(): Uint8Array;
    fake_rgba(): Uint8Array;
    match_box(x0: number, y0: number, x1: number, y1: number, k: number): Float64Array;
    static match_threshold(): number;
    /**
     * `method` is one of `splice_soft`, `splice_hard`, `color_shift`, `warp`.
     */
    constructor(seed: number, method: string);
    random_swap(draw: number, global_probability: number): Swap;
    source_rgba(): Uint8Array;
    swap(h: number, w: number, poisson: boolean): Swap;
    readonly height: number;
    readonly width: number;
}

/**
 * A swapped image and its artifact box.
 */
export class Swap {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * `[x0, y0, x1, y1]` in pixels, half-open; empty when nothing changed.
     */
    readonly artifact_box: Uint32Array;
    readonly blend: string;
    readonly global: boolean;
    /**
     * RGBA bytes, row-major.
     */
    readonly image: Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly __wbg_swap_free: (a: number, b: number) => void;
    readonly scene_anchor_count: (a: number) => number;
    readonly scene_dssim_rgba: (a: number) => [number, number];
    readonly scene_fake_rgba: (a: number) => [number, number];
    readonly scene_height: (a: number) => number;
    readonly scene_match_box: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly scene_match_threshold: () => number;
    readonly scene_new: (a: number, b: number, c: number) => [number, number, number];
    readonly scene_random_swap: (a: number, b: number, c: number) => [number, number, number];
    readonly scene_source_rgba: (a: number) => [number, number];
    readonly scene_swap: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly scene_width: (a: number) => number;
    readonly swap_artifact_box: (a: number) => [number, number];
    readonly swap_blend: (a: number) => [number, number];
    readonly swap_global: (a: number) => number;
    readonly swap_image: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
