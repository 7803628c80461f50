#pragma once

#include "mcstl/types.hpp"

#include <string_view>

namespace mcstl {

/// Deterministic hashed character-trigram featurizer for raw-text records.
/// Each trigram of the padded byte string is hashed (FNV-1a 64) into one of
/// `dim` signed buckets; the result is L2-normalized. Stands in for a frozen
/// sentence encoder so datasets with `text` fields are usable without one.
Vector text_embedding(std::string_view text, int dim);

}  // namespace mcstl
