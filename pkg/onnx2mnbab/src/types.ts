/** JSON network format of the verifier (see the main README). */

export interface AffineLayer {
  type: "affine";
  W: number[][];
  b: number[];
}

export interface ConvLayer {
  type: "conv";
  out_ch: number;
  kernel: number[][][][]; // (out_ch, in_ch, kh, kw)
  stride: number;
  padding: number;
  bias: number[];
  in_hw: [number, number];
}

export interface ReluLayer {
  type: "relu";
}

export interface ResidualLayer {
  type: "residual";
  branch: Layer[];
}

export type Layer = AffineLayer | ConvLayer | ReluLayer | ResidualLayer;

export interface NetworkJson {
  input_dim: number;
  layers: Layer[];
}

export interface ConversionReport {
  supportedOps: string[];
  unsupportedOps: string[];
  shapeLog: string[];
  outputPath: string | null;
}

export class UnsupportedOpError extends Error {
  constructor(public op: string, detail = "") {
    super(`unsupported op ${op}${detail ? `: ${detail}` : ""}`);
    this.name = "UnsupportedOpError";
  }
}

export class ShapeInferenceError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ShapeInferenceError";
  }
}
