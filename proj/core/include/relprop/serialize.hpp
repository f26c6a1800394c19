#pragma once

#include <string>

#include "relprop/model.hpp"

namespace relprop {

// Binary model container: an 8-byte magic tag, a length-prefixed JSON header
// describing the architecture, and one length-prefixed block of little-endian
// float64 data per parameter, in layer order and LayerSpec::params order.
//
// save followed by load reproduces every parameter bit for bit.  load throws
// IoError on unreadable files, unsupported format versions, truncated or
// oversized parameter blocks (the message names the offending layer and
// parameter), header/payload shape disagreements, and models that fail
// structural validation.
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

}  // namespace relprop
