#include "bonnet/volume.hpp"

namespace bonnet {

const char* value_kind_name(ValueKind kind) {
    switch (kind) {
    case ValueKind::HuI16: return "hu_i16";
    case ValueKind::LabelsU16: return "labels_u16";
    }
    fail(Err::UnknownKind, "unhandled value kind");
}

ValueKind value_kind_from_name(const std::string& name) {
    if (name == "hu_i16") return ValueKind::HuI16;
    if (name == "labels_u16") return ValueKind::LabelsU16;
    fail(Err::UnknownKind, "unknown value kind '" + name + "'");
}

} // namespace bonnet
