/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const __wbg_swap_free: (a: number, b: number) => void;
export const scene_anchor_count: (a: number) => number;
export const scene_dssim_rgba: (a: number) => [number, number];
export const scene_fake_rgba: (a: number) => [number, number];
export const scene_height: (a: number) => number;
export const scene_match_box: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const scene_match_threshold: () => number;
export const scene_new: (a: number, b: number, c: number) => [number, number, number];
export const scene_random_swap: (a: number, b: number, c: number) => [number, number, number];
export const scene_source_rgba: (a: number) => [number, number];
export const scene_swap: (a: number, b: number, c: number, d: number) => [number, number, number];
export const scene_width: (a: number) => number;
export const swap_artifact_box: (a: number) => [number, number];
export const swap_blend: (a: number) => [number, number];
export const swap_global: (a: number) => number;
export const swap_image: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
