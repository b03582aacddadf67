/** Thin layer over the ONNX protobuf: model decoding, tensor data and
 * node attribute extraction. */

import { readFileSync } from "node:fs";
// onnx-proto is CommonJS: default-import for runtime, type-only for types
import onnxProto from "onnx-proto";
import type { onnx } from "onnx-proto";

const onnxRt = (onnxProto as unknown as { onnx: typeof onnx }).onnx;

export type ModelProto = onnx.ModelProto;
export type NodeProto = onnx.INodeProto;
export type TensorProto = onnx.ITensorProto;

export function loadModel(path: string): onnx.ModelProto {
  return onnxRt.ModelProto.decode(readFileSync(path));
}

const FLOAT = onnxRt.TensorProto.DataType.FLOAT;
const DOUBLE = onnxRt.TensorProto.DataType.DOUBLE;
const INT64 = onnxRt.TensorProto.DataType.INT64;

/** Initializer payloads arrive either in typed fields or as raw
 * little-endian bytes; normalize to float64. */
export function tensorData(t: TensorProto): Float64Array {
  const raw = t.rawData as Uint8Array | undefined;
  if (raw && raw.length > 0) {
    const buf = raw.buffer.slice(raw.byteOffset, raw.byteOffset + raw.byteLength);
    if (t.dataType === FLOAT) return Float64Array.from(new Float32Array(buf));
    if (t.dataType === DOUBLE) return new Float64Array(buf);
    if (t.dataType === INT64) {
      return Float64Array.from(new BigInt64Array(buf), (v) => Number(v));
    }
    throw new Error(`initializer ${t.name}: unsupported raw dtype ${t.dataType}`);
  }
  if (t.floatData && t.floatData.length) return Float64Array.from(t.floatData);
  if (t.doubleData && t.doubleData.length) return Float64Array.from(t.doubleData);
  if (t.int64Data && t.int64Data.length) {
    return Float64Array.from(t.int64Data as unknown as number[], (v) => Number(v));
  }
  return new Float64Array(0);
}

export function tensorDims(t: TensorProto): number[] {
  return (t.dims ?? []).map((d) => Number(d));
}

export function attrInt(node: NodeProto, name: string, dflt: number): number {
  const a = (node.attribute ?? []).find((x) => x.name === name);
  if (!a) return dflt;
  return Number(a.i ?? dflt);
}

export function attrFloat(node: NodeProto, name: string, dflt: number): number {
  const a = (node.attribute ?? []).find((x) => x.name === name);
  if (!a) return dflt;
  return a.f === 0 && a.i ? Number(a.i) : Number(a.f ?? dflt);
}

export function attrInts(node: NodeProto, name: string, dflt: number[]): number[] {
  const a = (node.attribute ?? []).find((x) => x.name === name);
  if (!a || !a.ints) return dflt;
  return (a.ints as unknown as Array<number | bigint>).map((v) => Number(v));
}

/** Shape of the single real graph input (initializers excluded). */
export function graphInputShape(model: onnx.ModelProto): { name: string; dims: number[] } {
  const graph = model.graph!;
  const initNames = new Set((graph.initializer ?? []).map((t) => t.name ?? ""));
  const inputs = (graph.input ?? []).filter((v) => !initNames.has(v.name ?? ""));
  if (inputs.length !== 1) {
    throw new Error(`expected exactly one graph input, found ${inputs.length}`);
  }
  const v = inputs[0];
  const dims = (v.type?.tensorType?.shape?.dim ?? []).map((d) =>
    d.dimValue != null ? Number(d.dimValue) : -1,
  );
  return { name: v.name ?? "", dims };
}
