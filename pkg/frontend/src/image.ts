/**
 * Minimal RGB image container plus the geometry the adapter needs:
 * crop, nearest-neighbor resample, and PNG file I/O.
 */

import * as fs from "node:fs";

import { PNG } from "pngjs";

export interface RgbImage {
  width: number;
  height: number;
  /** Row-major RGB, length width * height * 3. */
  pixels: Uint8Array;
}

export class ImageError extends Error {}

export function makeImage(width: number, height: number, pixels: Uint8Array): RgbImage {
  if (width < 1 || height < 1) {
    throw new ImageError(`image must be at least 1x1, got ${width}x${height}`);
  }
  if (pixels.length !== width * height * 3) {
    throw new ImageError(
      `pixel buffer is ${pixels.length} bytes, ${width}x${height} RGB needs ${width * height * 3}`,
    );
  }
  return { width, height, pixels };
}

export interface CropWindow {
  x: number;
  y: number;
  w: number;
  h: number;
}

export function cropImage(image: RgbImage, window: CropWindow): RgbImage {
  const { x, y, w, h } = window;
  if (w < 1 || h < 1 || x < 0 || y < 0 || x + w > image.width || y + h > image.height) {
    throw new ImageError(
      `crop ${JSON.stringify(window)} outside ${image.width}x${image.height} image`,
    );
  }
  const out = new Uint8Array(w * h * 3);
  for (let row = 0; row < h; row++) {
    const src = ((y + row) * image.width + x) * 3;
    out.set(image.pixels.subarray(src, src + w * 3), row * w * 3);
  }
  return { width: w, height: h, pixels: out };
}

/** Square nearest-neighbor resample; the mock encoder's "preprocessing". */
export function resampleSquare(image: RgbImage, size: number): RgbImage {
  const out = new Uint8Array(size * size * 3);
  for (let i = 0; i < size; i++) {
    const srcY = Math.min(Math.floor((i * image.height) / size), image.height - 1);
    for (let j = 0; j < size; j++) {
      const srcX = Math.min(Math.floor((j * image.width) / size), image.width - 1);
      const src = (srcY * image.width + srcX) * 3;
      const dst = (i * size + j) * 3;
      out[dst] = image.pixels[src]!;
      out[dst + 1] = image.pixels[src + 1]!;
      out[dst + 2] = image.pixels[src + 2]!;
    }
  }
  return { width: size, height: size, pixels: out };
}

/** Deterministic synthetic test image: smooth gradients with a seed-placed bright block. */
export function imageFromSeed(width: number, height: number, seed: number): RgbImage {
  const pixels = new Uint8Array(width * height * 3);
  const bx = (seed * 37) % Math.max(width - Math.floor(width / 4), 1);
  const by = (seed * 53) % Math.max(height - Math.floor(height / 4), 1);
  const bw = Math.max(Math.floor(width / 4), 1);
  const bh = Math.max(Math.floor(height / 4), 1);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = (y * width + x) * 3;
      pixels[i] = (x * 255 / width) | 0;
      pixels[i + 1] = (y * 255 / height) | 0;
      pixels[i + 2] = ((x + y + seed * 17) % 256);
      if (x >= bx && x < bx + bw && y >= by && y < by + bh) {
        pixels[i] = 250;
        pixels[i + 1] = 250;
        pixels[i + 2] = 250;
      }
    }
  }
  return { width, height, pixels };
}

export function savePng(image: RgbImage, filePath: string): void {
  const png = new PNG({ width: image.width, height: image.height });
  for (let i = 0, j = 0; i < image.pixels.length; i += 3, j += 4) {
    png.data[j] = image.pixels[i]!;
    png.data[j + 1] = image.pixels[i + 1]!;
    png.data[j + 2] = image.pixels[i + 2]!;
    png.data[j + 3] = 255;
  }
  fs.writeFileSync(filePath, PNG.sync.write(png));
}

export function loadPng(filePath: string): RgbImage {
  const png = PNG.sync.read(fs.readFileSync(filePath));
  const pixels = new Uint8Array(png.width * png.height * 3);
  for (let i = 0, j = 0; j < png.data.length; i += 3, j += 4) {
    pixels[i] = png.data[j]!;
    pixels[i + 1] = png.data[j + 1]!;
    pixels[i + 2] = png.data[j + 2]!;
  }
  return makeImage(png.width, png.height, pixels);
}
