/** Programmatic ONNX models for the converter tests. */

import onnxProto from "onnx-proto";
import type { onnx as onnxTypes } from "onnx-proto";

const onnx = (onnxProto as unknown as { onnx: typeof onnxTypes }).onnx;

function f32(name: string, dims: number[], vals: number[]): onnxTypes.TensorProto {
  return onnx.TensorProto.create({
    name,
    dims,
    dataType: onnx.TensorProto.DataType.FLOAT,
    floatData: Array.from(Float32Array.from(vals), Number),
  });
}

function vinfo(name: string, dims?: number[]): onnxTypes.ValueInfoProto {
  return onnx.ValueInfoProto.create({
    name,
    type: onnx.TypeProto.create({
      tensorType: onnx.TypeProto.Tensor.create({
        elemType: 1,
        shape: dims
          ? onnx.TensorShapeProto.create({
              dim: dims.map((d) => onnx.TensorShapeProto.Dimension.create({ dimValue: d })),
            })
          : undefined,
      }),
    }),
  });
}

function node(opType: string, input: string[], output: string[], attrs: onnxTypes.IAttributeProto[] = []) {
  return onnx.NodeProto.create({ opType, input, output, attribute: attrs });
}

function ints(name: string, vals: number[]): onnxTypes.IAttributeProto {
  return onnx.AttributeProto.create({
    name,
    type: onnx.AttributeProto.AttributeType.INTS,
    ints: vals,
  });
}

function int(name: string, val: number): onnxTypes.IAttributeProto {
  return onnx.AttributeProto.create({
    name,
    type: onnx.AttributeProto.AttributeType.INT,
    i: val,
  });
}

function finish(graph: onnxTypes.GraphProto): Uint8Array {
  const model = onnx.ModelProto.create({
    irVersion: 7,
    producerName: "onnx2mnbab-tests",
    graph,
    opsetImport: [onnx.OperatorSetIdProto.create({ version: 13 })],
  });
  return onnx.ModelProto.encode(model).finish();
}

/** Deterministic pseudo-random weights. */
export function rng(seed: number): () => number {
  let s = seed >>> 0 || 1;
  return () => {
    s ^= s << 13;
    s ^= s >>> 17;
    s ^= s << 5;
    return ((s >>> 0) / 0xffffffff) * 2 - 1;
  };
}

export function mlpModel(seed = 7): Uint8Array {
  const rand = rng(seed);
  const scale = (fanIn: number) => 1 / Math.sqrt(fanIn);
  const w1 = Array.from({ length: 4 * 8 }, () => rand() * scale(4));
  const b1 = Array.from({ length: 8 }, () => rand() * 0.1);
  const w2 = Array.from({ length: 8 * 3 }, () => rand() * scale(8));
  const b2 = Array.from({ length: 3 }, () => rand() * 0.1);
  const graph = onnx.GraphProto.create({
    name: "mlp",
    input: [vinfo("x", [1, 4])],
    output: [vinfo("y")],
    initializer: [
      f32("w1", [8, 4], w1),
      f32("b1", [8], b1),
      f32("w2", [3, 8], w2),
      f32("b2", [3], b2),
    ],
    node: [
      node("Gemm", ["x", "w1", "b1"], ["h1"], [int("transB", 1)]),
      node("Relu", ["h1"], ["a1"]),
      node("Gemm", ["a1", "w2", "b2"], ["y"], [int("transB", 1)]),
    ],
  });
  return finish(graph);
}

/** ConvSmall shape: Conv 16 4x4/2/0, Conv 32 4x4/2/0, FC 100, FC 10. */
export function convSmallModel(seed = 11, hw = 28): Uint8Array {
  const rand = rng(seed);
  const scale = (fanIn: number) => 1 / Math.sqrt(fanIn);
  const k1 = Array.from({ length: 16 * 1 * 4 * 4 }, () => rand() * scale(16));
  const c1b = Array.from({ length: 16 }, () => rand() * 0.1);
  const o1 = Math.floor((hw - 4) / 2) + 1;
  const k2 = Array.from({ length: 32 * 16 * 4 * 4 }, () => rand() * scale(256));
  const c2b = Array.from({ length: 32 }, () => rand() * 0.1);
  const o2 = Math.floor((o1 - 4) / 2) + 1;
  const flat = 32 * o2 * o2;
  const w3 = Array.from({ length: 100 * flat }, () => rand() * scale(flat));
  const b3 = Array.from({ length: 100 }, () => rand() * 0.1);
  const w4 = Array.from({ length: 10 * 100 }, () => rand() * scale(100));
  const b4 = Array.from({ length: 10 }, () => rand() * 0.1);
  const graph = onnx.GraphProto.create({
    name: "convsmall",
    input: [vinfo("x", [1, 1, hw, hw])],
    output: [vinfo("y")],
    initializer: [
      f32("k1", [16, 1, 4, 4], k1),
      f32("c1b", [16], c1b),
      f32("k2", [32, 16, 4, 4], k2),
      f32("c2b", [32], c2b),
      f32("w3", [100, flat], w3),
      f32("b3", [100], b3),
      f32("w4", [10, 100], w4),
      f32("b4", [10], b4),
    ],
    node: [
      node("Conv", ["x", "k1", "c1b"], ["h1"], [ints("kernel_shape", [4, 4]), ints("strides", [2, 2]), ints("pads", [0, 0, 0, 0])]),
      node("Relu", ["h1"], ["a1"]),
      node("Conv", ["a1", "k2", "c2b"], ["h2"], [ints("kernel_shape", [4, 4]), ints("strides", [2, 2]), ints("pads", [0, 0, 0, 0])]),
      node("Relu", ["h2"], ["a2"]),
      node("Flatten", ["a2"], ["f"], [int("axis", 1)]),
      node("Gemm", ["f", "w3", "b3"], ["h3"], [int("transB", 1)]),
      node("Relu", ["h3"], ["a3"]),
      node("Gemm", ["a3", "w4", "b4"], ["y"], [int("transB", 1)]),
    ],
  });
  return finish(graph);
}

/** MatMul+Add pair instead of Gemm (a common exporter pattern). */
export function matmulAddModel(seed = 13): Uint8Array {
  const rand = rng(seed);
  const w = Array.from({ length: 3 * 5 }, () => rand());
  const b = Array.from({ length: 5 }, () => rand());
  const graph = onnx.GraphProto.create({
    name: "matmuladd",
    input: [vinfo("x", [1, 3])],
    output: [vinfo("y")],
    initializer: [f32("w", [3, 5], w), f32("b", [5], b)],
    node: [
      node("MatMul", ["x", "w"], ["h"]),
      node("Add", ["h", "b"], ["a"]),
      node("Relu", ["a"], ["y"]),
    ],
  });
  return finish(graph);
}

/** Identity-shortcut residual block. */
export function residualModel(seed = 17): Uint8Array {
  const rand = rng(seed);
  const mk = (n: number) => Array.from({ length: n }, () => rand() * 0.4);
  const graph = onnx.GraphProto.create({
    name: "res",
    input: [vinfo("x", [1, 4])],
    output: [vinfo("y")],
    initializer: [
      f32("w1", [4, 4], mk(16)),
      f32("b1", [4], mk(4)),
      f32("w2", [4, 4], mk(16)),
      f32("b2", [4], mk(4)),
      f32("w3", [2, 4], mk(8)),
      f32("b3", [2], mk(2)),
    ],
    node: [
      node("Gemm", ["x", "w1", "b1"], ["t"], [int("transB", 1)]),
      node("Relu", ["t"], ["t1"]),
      node("Gemm", ["t1", "w2", "b2"], ["br"], [int("transB", 1)]),
      node("Relu", ["br"], ["br1"]),
      node("Add", ["br1", "t1"], ["merged"]),
      node("Gemm", ["merged", "w3", "b3"], ["y"], [int("transB", 1)]),
    ],
  });
  return finish(graph);
}

export function maxPoolModel(): Uint8Array {
  const graph = onnx.GraphProto.create({
    name: "mp",
    input: [vinfo("x", [1, 1, 4, 4])],
    output: [vinfo("y")],
    node: [
      node("MaxPool", ["x"], ["y"], [ints("kernel_shape", [2, 2]), ints("strides", [2, 2])]),
    ],
  });
  return finish(graph);
}
