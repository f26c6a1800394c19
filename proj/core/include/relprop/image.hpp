#pragma once

#include <string>

#include "relprop/tensor.hpp"

namespace relprop {

// Reads an 8-bit binary PGM (P5) or PPM (P6) file into a (1,H,W) or (3,H,W)
// tensor with values scaled to [0,1].  Comments in the header are honoured.
// Throws IoError for other formats, maxval above 255 or truncated pixel data.
Tensor read_pnm(const std::string& path);

// Writes a (1,H,W) tensor as PGM or a (3,H,W) tensor as PPM.  Values are
// clamped to [0,1] and quantised to round(255*v), so the output is a pure
// function of the tensor.
void write_pnm(const Tensor& image, const std::string& path);

// Renders a signed attribution map over a grayscale version of the underlay
// and writes the result as PPM.  Attribution is summed over channels, scaled
// by its largest magnitude, and blended per pixel: positive values pull
// towards red, negative towards blue, the blend weight is the magnitude
// itself.  A zero map reproduces the underlay exactly; the peak-magnitude
// pixel of a positive-only map is fully saturated red.
// Both tensors must be rank 3 with matching height and width.
void export_heatmap(const Tensor& attribution, const Tensor& underlay,
                    const std::string& path);

}  // namespace relprop
