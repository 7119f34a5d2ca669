/* tslint:disable */
/* eslint-disable */

/**
 * Limiting risk against `γ = d/n` for each method, ridge at its optimum.
 */
export function risk_vs_gamma(r: number, sigma: number, theta0_norm: number, gamma_min: number, gamma_max: number, points: number): string;

/**
 * Limiting risk against the ridge parameter (log-spaced), with the
 * ridgeless and global-model levels as flat references.
 */
export function risk_vs_lambda(gamma: number, r: number, sigma: number, lambda_min: number, lambda_max: number, points: number): string;

/**
 * Draws one identity-covariance population and reports exact risk at
 * client 0 for every algorithm next to its limit.
 */
export function simulate(m: number, d: number, n: number, r: number, sigma: number, lambda: number, alpha: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly risk_vs_gamma: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly risk_vs_lambda: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly simulate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
