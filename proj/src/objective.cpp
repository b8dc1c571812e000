#include "bonnet/objective.hpp"

#include <fstream>

#include <json.hpp>

namespace bonnet {

ClassGrouping ClassGrouping::from_json_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), Err::IoError, "cannot open grouping file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, "grouping file " + path + " is not valid JSON: " + e.what());
    }
    require(j.is_object(), Err::IoError, "grouping file must be a JSON object");

    ClassGrouping g;
    for (const auto& [name, ids] : j.items()) {
        require(ids.is_array(), Err::IoError, "group '" + name + "' must map to an id array");
        std::set<uint16_t> set;
        for (const auto& id : ids) {
            require(id.is_number_integer() && id.get<int64_t>() >= 0 &&
                        id.get<int64_t>() <= 0xffff,
                    Err::IoError, "group '" + name + "' has a non-class-id entry");
            set.insert(uint16_t(id.get<int64_t>()));
        }
        g.groups[name] = std::move(set);
    }
    return g;
}

std::string ClassGrouping::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, ids] : groups) j[name] = std::vector<uint16_t>(ids.begin(), ids.end());
    return j.dump(2);
}

std::map<std::string, double> hard_dice(const std::vector<uint16_t>& pred,
                                        const std::vector<uint16_t>& gt,
                                        const ClassGrouping& grouping) {
    require(pred.size() == gt.size(), Err::ShapeMismatch,
            "prediction and ground-truth sizes differ");

    std::map<std::string, double> out;
    for (const auto& [name, ids] : grouping.groups) {
        uint64_t a = 0, b = 0, both = 0;
        for (size_t i = 0; i < pred.size(); ++i) {
            const bool in_a = ids.count(pred[i]) != 0;
            const bool in_b = ids.count(gt[i]) != 0;
            a += in_a;
            b += in_b;
            both += (in_a && in_b);
        }
        out[name] = (a + b == 0) ? 100.0 : 200.0 * double(both) / double(a + b);
    }
    return out;
}

} // namespace bonnet
