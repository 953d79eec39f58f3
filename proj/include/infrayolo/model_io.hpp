#pragma once

#include <iosfwd>
#include <string>

#include "infrayolo/graph.hpp"

namespace infrayolo {

// Model file: a text header (format version, detector info, one canonical
// line per node, parameter table) terminated by a "data" line, followed by
// every parameter in declaration order as 32-bit little-endian floats.
inline constexpr int kModelFormatVersion = 1;

void save_model(const ModelGraph& graph, std::ostream& out);
void save_model(const ModelGraph& graph, const std::string& path);
ModelGraph load_model(std::istream& in);
ModelGraph load_model(const std::string& path);

// Canonical topology text (the header without the parameter table).
std::string topology_text(const ModelGraph& graph);

}  // namespace infrayolo
