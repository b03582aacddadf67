/** Reference forward evaluation of the emitted JSON format (float64,
 * direct convolution); used by --check against the ONNX runtime. */

import { ConvLayer, Layer, NetworkJson } from "./types.js";

export function forward(net: NetworkJson, x: number[]): number[] {
  if (x.length !== net.input_dim) {
    throw new Error(`input has ${x.length} entries, network expects ${net.input_dim}`);
  }
  return runChain(net.layers, Array.from(x));
}

function runChain(layers: Layer[], z: number[]): number[] {
  for (const layer of layers) {
    if (layer.type === "affine") {
      const out = new Array(layer.W.length).fill(0);
      for (let i = 0; i < layer.W.length; i++) {
        let acc = layer.b[i];
        const row = layer.W[i];
        for (let j = 0; j < row.length; j++) acc += row[j] * z[j];
        out[i] = acc;
      }
      z = out;
    } else if (layer.type === "relu") {
      z = z.map((v) => (v > 0 ? v : 0));
    } else if (layer.type === "conv") {
      z = convForward(layer, z);
    } else {
      const branch = runChain(layer.branch, Array.from(z));
      z = z.map((v, i) => v + branch[i]);
    }
  }
  return z;
}

function convForward(layer: ConvLayer, z: number[]): number[] {
  const [h, w] = layer.in_hw;
  const inCh = layer.kernel[0].length;
  const kh = layer.kernel[0][0].length;
  const kw = layer.kernel[0][0][0].length;
  const s = layer.stride;
  const p = layer.padding;
  const oh = Math.floor((h + 2 * p - kh) / s) + 1;
  const ow = Math.floor((w + 2 * p - kw) / s) + 1;
  const out = new Array(layer.out_ch * oh * ow).fill(0);
  for (let co = 0; co < layer.out_ch; co++) {
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        let acc = layer.bias[co];
        for (let ci = 0; ci < inCh; ci++) {
          for (let ky = 0; ky < kh; ky++) {
            const iy = oy * s - p + ky;
            if (iy < 0 || iy >= h) continue;
            for (let kx = 0; kx < kw; kx++) {
              const ix = ox * s - p + kx;
              if (ix < 0 || ix >= w) continue;
              acc += layer.kernel[co][ci][ky][kx] * z[(ci * h + iy) * w + ix];
            }
          }
        }
        out[(co * oh + oy) * ow + ox] = acc;
      }
    }
  }
  return out;
}
