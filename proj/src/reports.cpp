#include "triqdef/reports.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>

#include "triqdef/binio.hpp"
#include "triqdef/error.hpp"

namespace triqdef::reports {

using nlohmann::json;

namespace {

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

json number_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

json accuracy_json(const std::map<int, double>& acc) {
    json a = json::array();
    for (const auto& [b, v] : acc) a.push_back({{"bits", b}, {"accuracy", v}});
    return a;
}

} // namespace

json clean_json(const std::map<int, double>& accuracy) {
    return {{"schema", kCleanSchema}, {"clean_accuracy", accuracy_json(accuracy)}};
}

std::string clean_csv(const std::map<int, double>& accuracy) {
    std::string out = "bits,top1_accuracy_fraction\n";
    for (const auto& [b, v] : accuracy) out += std::to_string(b) + "," + num(v) + "\n";
    return out;
}

json transfer_json(const evaluation::TransferReport& r) {
    json cells = json::array();
    for (const auto& c : r.cells) {
        cells.push_back({{"patch_id", c.patch_id},
                         {"source_bits", c.source_bits},
                         {"target_bits", c.target_bits},
                         {"asr", c.asr},
                         {"seen", c.seen}});
    }
    json means = json::array();
    for (const std::string split : {"all", "seen", "unseen"}) {
        for (const auto& [k, v] : r.mean_asr(split)) {
            means.push_back({{"split", split}, {"source_bits", k.first}, {"target_bits", k.second}, {"mean_asr", v}});
        }
    }
    json j{{"schema", kTransferSchema},
           {"targeted", r.targeted},
           {"clean_accuracy", accuracy_json(r.clean_accuracy)},
           {"cells", cells},
           {"mean_asr", means}};
    if (!r.similarity.empty()) j["similarity"] = align_json(r.similarity)["entries"];
    return j;
}

evaluation::TransferReport transfer_from_json(const json& j) {
    try {
        if (j.at("schema").get<std::string>() != kTransferSchema) throw DataError("transfer report: unknown schema");
        evaluation::TransferReport r;
        r.targeted = j.at("targeted").get<bool>();
        for (const auto& a : j.at("clean_accuracy")) r.clean_accuracy[a.at("bits").get<int>()] = a.at("accuracy").get<double>();
        for (const auto& c : j.at("cells")) {
            r.cells.push_back({c.at("patch_id").get<std::string>(), c.at("source_bits").get<int>(),
                               c.at("target_bits").get<int>(), c.at("asr").get<double>(), c.at("seen").get<bool>()});
        }
        if (j.contains("similarity")) {
            for (const auto& s : j.at("similarity")) {
                r.similarity.push_back({s.at("bits_a").get<int>(), s.at("bits_b").get<int>(),
                                        s.at("kind").get<std::string>(), s.at("tap").get<std::string>(),
                                        s.at("metric").get<std::string>(), s.at("value").get<double>()});
            }
        }
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("transfer report: ") + e.what());
    }
}

std::string transfer_csv(const evaluation::TransferReport& r) {
    std::string out = "patch_id,source_bits,target_bits,seen,asr_fraction\n";
    for (const auto& c : r.cells) {
        out += c.patch_id + "," + std::to_string(c.source_bits) + "," + std::to_string(c.target_bits) + "," +
               (c.seen ? "seen" : "unseen") + "," + num(c.asr) + "\n";
    }
    return out;
}

json align_json(const std::vector<evaluation::SimilarityEntry>& entries) {
    json a = json::array();
    for (const auto& s : entries) {
        a.push_back({{"bits_a", s.bits_a},
                     {"bits_b", s.bits_b},
                     {"kind", s.kind},
                     {"tap", s.tap},
                     {"metric", s.metric},
                     {"value", s.value}});
    }
    return {{"schema", kAlignSchema}, {"entries", a}};
}

std::string align_csv(const std::vector<evaluation::SimilarityEntry>& entries) {
    std::string out = "bits_a,bits_b,kind,tap,metric,similarity_unitless\n";
    for (const auto& s : entries) {
        out += std::to_string(s.bits_a) + "," + std::to_string(s.bits_b) + "," + s.kind + "," + s.tap + "," +
               s.metric + "," + num(s.value) + "\n";
    }
    return out;
}

json summary_json(const char* schema, const std::vector<SummaryRow>& rows) {
    json a = json::array();
    for (const auto& r : rows) {
        a.push_back({{"variant", r.variant},
                     {"split", r.split},
                     {"cross_bit_asr", number_or_null(r.cross_bit_asr)},
                     {"mean_asr", number_or_null(r.mean_asr)},
                     {"clean_accuracy", accuracy_json(r.clean_accuracy)}});
    }
    return {{"schema", schema}, {"rows", a}};
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::string out = "variant,split,cross_bit_asr_fraction,mean_asr_fraction";
    if (!rows.empty()) {
        for (const auto& [b, v] : rows.front().clean_accuracy) out += ",clean_accuracy_" + std::to_string(b) + "bit_fraction";
    }
    out += "\n";
    for (const auto& r : rows) {
        out += r.variant + "," + r.split + "," + num(r.cross_bit_asr) + "," + num(r.mean_asr);
        for (const auto& [b, v] : r.clean_accuracy) out += "," + num(v);
        out += "\n";
    }
    return out;
}

void write(const std::string& dir, const std::string& stem, const json& j, const std::string& csv) {
    std::filesystem::create_directories(dir);
    binio::write_file((std::filesystem::path(dir) / (stem + ".json")).string(), j.dump(2) + "\n");
    binio::write_file((std::filesystem::path(dir) / (stem + ".csv")).string(), csv);
}

} // namespace triqdef::reports
