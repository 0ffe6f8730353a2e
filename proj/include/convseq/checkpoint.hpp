#pragma once

// Binary layout (all integers and reals little-endian):
//   "CASQ1"
//   repeated until EOF:
//     u32 name length, name bytes, u32 rank, u64 extent x rank,
//     f64 x product(extents)
// Config fields are stored as rank-0 records named "config.<key>", plus
// "meta.ctc_blank_index" and "meta.sos_eos_id".

#include <iosfwd>
#include <string>

#include "convseq/model.hpp"

namespace convseq {

void write_checkpoint(const Model &model, std::ostream &out);
void save_checkpoint(const Model &model, const std::string &path);

// Rebuilds the model from the stored config and overwrites every parameter.
// Throws FormatError on a bad magic, truncated record, unknown or missing
// parameter, or shape mismatch.
Model read_checkpoint(std::istream &in);
Model load_checkpoint(const std::string &path);

} // namespace convseq
