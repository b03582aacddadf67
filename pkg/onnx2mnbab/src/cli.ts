#!/usr/bin/env node
/** onnx2mnbab IN.onnx OUT.json [--check]
 *
 * Converts an ONNX model to the verifier's JSON network format.
 * --check additionally evaluates the original model with the ONNX
 * runtime on 20 random inputs and compares against the converted
 * network (tolerance 1e-5 absolute).
 *
 * Exit codes: 0 converted (and check passed), 1 conversion refused or
 * failed, 2 parity check failed.
 */

import { writeFileSync } from "node:fs";

import { convertModel } from "./convert.js";
import { forward } from "./evaluate.js";
import { loadModel, graphInputShape } from "./reader.js";
import { UnsupportedOpError } from "./types.js";

export async function main(argv: string[]): Promise<number> {
  const args = argv.filter((a) => !a.startsWith("--"));
  const check = argv.includes("--check");
  if (args.length !== 2) {
    console.error("usage: onnx2mnbab IN.onnx OUT.json [--check]");
    return 1;
  }
  const [inPath, outPath] = args;
  let model;
  let converted;
  try {
    model = loadModel(inPath);
    converted = convertModel(model);
  } catch (err) {
    if (err instanceof UnsupportedOpError) {
      console.error(`refused: ${err.message}`);
    } else {
      console.error(`conversion failed: ${(err as Error).message}`);
    }
    return 1;
  }
  const { net, report } = converted;
  writeFileSync(outPath, JSON.stringify(net));
  report.outputPath = outPath;
  console.error(`converted ${inPath} -> ${outPath}`);
  for (const line of report.shapeLog) console.error(`  ${line}`);

  if (check) {
    const worst = await checkParity(inPath, net, model);
    console.error(`parity check: max |diff| = ${worst.toExponential(2)} over 20 random inputs`);
    if (worst > 1e-5) {
      console.error("parity check FAILED (tolerance 1e-5)");
      return 2;
    }
  }
  return 0;
}

export async function checkParity(
  onnxPath: string,
  net: { input_dim: number; layers: unknown[] },
  model: ReturnType<typeof loadModel>,
  nInputs = 20,
): Promise<number> {
  const ort = await import("onnxruntime-node");
  const session = await ort.InferenceSession.create(onnxPath);
  const { name, dims } = graphInputShape(model);
  const shape = dims.map((d) => (d === -1 ? 1 : d));
  let worst = 0;
  let seed = 12345;
  const rand = () => {
    // xorshift: deterministic inputs without a dependency
    seed ^= seed << 13;
    seed ^= seed >>> 17;
    seed ^= seed << 5;
    return ((seed >>> 0) / 0xffffffff) * 2 - 1;
  };
  for (let trial = 0; trial < nInputs; trial++) {
    const x = Array.from({ length: net.input_dim }, rand);
    const tensor = new ort.Tensor("float32", Float32Array.from(x), shape);
    const outputs = await session.run({ [name]: tensor });
    const got = Array.from(outputs[session.outputNames[0]].data as Float32Array, Number);
    // evaluate the converted net on the float32-rounded input the
    // runtime actually saw
    const ours = forward(net as never, Array.from(Float32Array.from(x), Number));
    for (let i = 0; i < got.length; i++) {
      worst = Math.max(worst, Math.abs(got[i] - ours[i]));
    }
  }
  return worst;
}

const isMain = process.argv[1] && import.meta.url.endsWith(process.argv[1].split("/").pop()!);
if (isMain) {
  main(process.argv.slice(2)).then((code) => process.exit(code));
}
