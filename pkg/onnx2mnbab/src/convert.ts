/** Graph-to-chain conversion.
 *
 * The verifier consumes a linear chain (affine / conv / relu, plus
 * residual blocks whose branch is added back onto the block input), so
 * the converter walks the topologically-sorted ONNX nodes while
 * maintaining a single dataflow head.  Anything outside the supported
 * op set, or any graph shape that cannot be expressed as such a chain,
 * is refused with the offending op named -- never approximated.
 */

import type { onnx } from "onnx-proto";

import {
  NodeProto,
  attrFloat,
  attrInt,
  attrInts,
  graphInputShape,
  tensorData,
  tensorDims,
} from "./reader.js";
import {
  AffineLayer,
  ConversionReport,
  ConvLayer,
  Layer,
  NetworkJson,
  ShapeInferenceError,
  UnsupportedOpError,
} from "./types.js";

type Shape = { kind: "chw"; c: number; h: number; w: number } | { kind: "flat"; d: number };

function shapeStr(s: Shape): string {
  return s.kind === "chw" ? `${s.c}x${s.h}x${s.w}` : `${s.d}`;
}

function flatSize(s: Shape): number {
  return s.kind === "chw" ? s.c * s.h * s.w : s.d;
}

const SUPPORTED = new Set(["Gemm", "MatMul", "Add", "Conv", "Relu", "Flatten"]);

interface Init {
  dims: number[];
  data: Float64Array;
}

export function convertModel(model: onnx.ModelProto): { net: NetworkJson; report: ConversionReport } {
  const graph = model.graph;
  if (!graph) throw new Error("model has no graph");
  const inits = new Map<string, Init>();
  for (const t of graph.initializer ?? []) {
    inits.set(t.name ?? "", { dims: tensorDims(t), data: tensorData(t) });
  }
  const input = graphInputShape(model);
  let shape = inputShape(input.dims);
  const inputDim = flatSize(shape);

  const layers: Layer[] = [];
  let head = input.name;
  // tensors that were the chain head at some earlier point, with the
  // number of layers emitted at that moment (for residual shortcuts)
  const history = new Map<string, { pos: number; shape: Shape }>();
  history.set(head, { pos: 0, shape });

  const report: ConversionReport = {
    supportedOps: [],
    unsupportedOps: [],
    shapeLog: [`input: ${shapeStr(shape)}`],
    outputPath: null,
  };

  for (const node of graph.node ?? []) {
    const op = node.opType ?? "?";
    if (!SUPPORTED.has(op)) {
      report.unsupportedOps.push(op);
      throw new UnsupportedOpError(op);
    }
    switch (op) {
      case "Gemm":
        shape = handleGemm(node, layers, head, shape, inits);
        break;
      case "MatMul":
        shape = handleMatMul(node, layers, head, shape, inits);
        break;
      case "Conv":
        shape = handleConv(node, layers, head, shape, inits);
        break;
      case "Relu":
        requireHead(node, head, 0);
        layers.push({ type: "relu" });
        break;
      case "Flatten": {
        requireHead(node, head, 0);
        const axis = attrInt(node, "axis", 1);
        if (axis !== 1 && axis !== 0) {
          throw new UnsupportedOpError("Flatten", `axis=${axis}`);
        }
        shape = { kind: "flat", d: flatSize(shape) };
        break;
      }
      case "Add":
        shape = handleAdd(node, layers, head, shape, inits, history);
        break;
    }
    report.supportedOps.push(op);
    head = node.output?.[0] ?? "";
    history.set(head, { pos: layers.length, shape });
    report.shapeLog.push(`${op}: ${shapeStr(shape)}`);
  }

  const outName = graph.output?.[0]?.name ?? "";
  if (head !== outName) {
    throw new ShapeInferenceError(`graph output ${outName} is not the chain head ${head}`);
  }
  if (shape.kind !== "flat") {
    shape = { kind: "flat", d: flatSize(shape) };
  }
  return { net: { input_dim: inputDim, layers }, report };
}

function inputShape(dims: number[]): Shape {
  const d = dims.map((v) => (v === -1 ? 1 : v));
  if (d.length === 4) {
    if (d[0] !== 1) throw new ShapeInferenceError(`batch dimension must be 1, got ${d[0]}`);
    return { kind: "chw", c: d[1], h: d[2], w: d[3] };
  }
  if (d.length === 3) return { kind: "chw", c: d[0], h: d[1], w: d[2] };
  if (d.length === 2) {
    if (d[0] !== 1) throw new ShapeInferenceError(`batch dimension must be 1, got ${d[0]}`);
    return { kind: "flat", d: d[1] };
  }
  if (d.length === 1) return { kind: "flat", d: d[0] };
  throw new ShapeInferenceError(`cannot interpret input shape [${dims}]`);
}

function requireHead(node: NodeProto, head: string, idx: number): void {
  if ((node.input ?? [])[idx] !== head) {
    throw new ShapeInferenceError(
      `${node.opType}: input ${node.input?.[idx]} is not the current chain head (${head}); ` +
        "only single-path graphs with identity residuals are supported",
    );
  }
}

function toMatrix(data: Float64Array, rows: number, cols: number, transpose: boolean): number[][] {
  const out: number[][] = [];
  if (!transpose) {
    // data is (rows, cols) row-major; we want it as-is
    for (let r = 0; r < rows; r++) out.push(Array.from(data.subarray(r * cols, (r + 1) * cols)));
  } else {
    for (let c = 0; c < cols; c++) {
      const row: number[] = [];
      for (let r = 0; r < rows; r++) row.push(data[r * cols + c]);
      out.push(row);
    }
  }
  return out;
}

function handleGemm(node: NodeProto, layers: Layer[], head: string, shape: Shape, inits: Map<string, Init>): Shape {
  requireHead(node, head, 0);
  if (shape.kind !== "flat") {
    throw new ShapeInferenceError("Gemm on an unflattened tensor (insert Flatten)");
  }
  const alpha = attrFloat(node, "alpha", 1.0);
  const beta = attrFloat(node, "beta", 1.0);
  if (attrInt(node, "transA", 0) !== 0) throw new UnsupportedOpError("Gemm", "transA=1");
  const transB = attrInt(node, "transB", 0) === 1;
  const weight = inits.get(node.input?.[1] ?? "");
  if (!weight) throw new ShapeInferenceError("Gemm weight must be an initializer");
  const [d0, d1] = weight.dims;
  // our convention is z_out = W z_in with W of shape (out, in)
  const W = transB ? toMatrix(weight.data, d0, d1, false) : toMatrix(weight.data, d0, d1, true);
  const outW = transB ? d0 : d1;
  const inW = transB ? d1 : d0;
  if (inW !== shape.d) throw new ShapeInferenceError(`Gemm expects input ${inW}, chain has ${shape.d}`);
  let b = new Array(outW).fill(0);
  const biasName = node.input?.[2];
  if (biasName) {
    const bias = inits.get(biasName);
    if (!bias) throw new ShapeInferenceError("Gemm bias must be an initializer");
    b = Array.from(bias.data, (v) => beta * v);
    if (b.length !== outW) throw new ShapeInferenceError("Gemm bias width mismatch");
  }
  if (alpha !== 1.0) {
    for (const row of W) for (let j = 0; j < row.length; j++) row[j] *= alpha;
  }
  layers.push({ type: "affine", W, b });
  return { kind: "flat", d: outW };
}

function handleMatMul(node: NodeProto, layers: Layer[], head: string, shape: Shape, inits: Map<string, Init>): Shape {
  requireHead(node, head, 0);
  if (shape.kind !== "flat") throw new ShapeInferenceError("MatMul on an unflattened tensor");
  const weight = inits.get(node.input?.[1] ?? "");
  if (!weight) throw new ShapeInferenceError("MatMul weight must be an initializer");
  const [inW, outW] = weight.dims;
  if (inW !== shape.d) throw new ShapeInferenceError(`MatMul expects input ${inW}, chain has ${shape.d}`);
  const W = toMatrix(weight.data, inW, outW, true);
  layers.push({ type: "affine", W, b: new Array(outW).fill(0) });
  return { kind: "flat", d: outW };
}

function handleConv(node: NodeProto, layers: Layer[], head: string, shape: Shape, inits: Map<string, Init>): Shape {
  requireHead(node, head, 0);
  if (shape.kind !== "chw") throw new ShapeInferenceError("Conv needs a (C,H,W) tensor");
  if (attrInt(node, "group", 1) !== 1) throw new UnsupportedOpError("Conv", "group != 1");
  const dil = attrInts(node, "dilations", [1, 1]);
  if (dil.some((v) => v !== 1)) throw new UnsupportedOpError("Conv", "dilations != 1");
  const weight = inits.get(node.input?.[1] ?? "");
  if (!weight) throw new ShapeInferenceError("Conv weight must be an initializer");
  const [outCh, inCh, kh, kw] = weight.dims;
  if (inCh !== shape.c) throw new ShapeInferenceError(`Conv expects ${inCh} channels, chain has ${shape.c}`);
  const strides = attrInts(node, "strides", [1, 1]);
  if (strides[0] !== strides[1]) throw new UnsupportedOpError("Conv", "non-square stride");
  const pads = attrInts(node, "pads", [0, 0, 0, 0]);
  if (new Set(pads).size !== 1) throw new UnsupportedOpError("Conv", "asymmetric padding");
  const ks = attrInts(node, "kernel_shape", [kh, kw]);
  if (ks[0] !== kh || ks[1] !== kw) throw new ShapeInferenceError("Conv kernel_shape disagrees with weights");

  const kernel: number[][][][] = [];
  let idx = 0;
  for (let o = 0; o < outCh; o++) {
    const per: number[][][] = [];
    for (let i = 0; i < inCh; i++) {
      const plane: number[][] = [];
      for (let y = 0; y < kh; y++) {
        plane.push(Array.from(weight.data.subarray(idx, idx + kw)));
        idx += kw;
      }
      per.push(plane);
    }
    kernel.push(per);
  }
  let bias = new Array(outCh).fill(0);
  const biasName = node.input?.[2];
  if (biasName) {
    const b = inits.get(biasName);
    if (!b) throw new ShapeInferenceError("Conv bias must be an initializer");
    bias = Array.from(b.data);
  }
  const stride = strides[0];
  const padding = pads[0];
  const oh = Math.floor((shape.h + 2 * padding - kh) / stride) + 1;
  const ow = Math.floor((shape.w + 2 * padding - kw) / stride) + 1;
  if (oh <= 0 || ow <= 0) throw new ShapeInferenceError("Conv kernel does not fit the input");
  const layer: ConvLayer = {
    type: "conv",
    out_ch: outCh,
    kernel,
    stride,
    padding,
    bias,
    in_hw: [shape.h, shape.w],
  };
  layers.push(layer);
  return { kind: "chw", c: outCh, h: oh, w: ow };
}

function handleAdd(
  node: NodeProto,
  layers: Layer[],
  head: string,
  shape: Shape,
  inits: Map<string, Init>,
  history: Map<string, { pos: number; shape: Shape }>,
): Shape {
  const [a, b] = node.input ?? [];
  const initA = inits.get(a);
  const initB = inits.get(b);
  if (initA || initB) {
    // bias add: fold into the producing affine layer when possible
    const dataName = initA ? b : a;
    const bias = (initA ?? initB)!;
    if (dataName !== head) {
      throw new ShapeInferenceError("Add: data input is not the chain head");
    }
    const vec = Array.from(bias.data);
    if (vec.length !== flatSize(shape)) {
      throw new UnsupportedOpError("Add", "broadcast bias shapes are not supported");
    }
    const last = layers[layers.length - 1];
    if (last && last.type === "affine") {
      const aff = last as AffineLayer;
      aff.b = aff.b.map((v, i) => v + vec[i]);
    } else {
      const d = flatSize(shape);
      const W = Array.from({ length: d }, (_, i) =>
        Array.from({ length: d }, (_, j) => (i === j ? 1 : 0)),
      );
      layers.push({ type: "affine", W, b: vec });
    }
    return shape;
  }
  // residual add: one side must be an earlier chain head (the identity
  // path), the other the current head (the branch output)
  const other = a === head ? b : b === head ? a : null;
  if (other === null) {
    throw new UnsupportedOpError("Add", "neither input is the chain head");
  }
  const anchor = history.get(other);
  if (!anchor) {
    throw new UnsupportedOpError("Add", "shortcut input is not on the chain (two-path residuals are not supported)");
  }
  if (flatSize(anchor.shape) !== flatSize(shape)) {
    throw new ShapeInferenceError("residual Add joins tensors of different widths");
  }
  const branch = layers.splice(anchor.pos);
  if (branch.length === 0) {
    throw new ShapeInferenceError("residual Add with an empty branch");
  }
  layers.push({ type: "residual", branch });
  return shape;
}
