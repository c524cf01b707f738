#include "cli_support.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <set>

#include "recalx/error.hpp"
#include "recalx/external_model.hpp"
#include "recalx/io.hpp"
#include "recalx/theory.hpp"

namespace recalx::cli {
namespace {

std::string flag_name(const std::string& token) {
    if (token.rfind("--", 0) != 0) {
        return {};
    }
    return token.substr(2, token.find('=') == std::string::npos ? std::string::npos : token.find('=') - 2);
}

std::string scalar_token(const nlohmann::json& v, const std::string& key) {
    if (v.is_string()) {
        return v.get<std::string>();
    }
    if (v.is_number_integer() || v.is_number_unsigned()) {
        return v.dump();
    }
    if (v.is_number_float()) {
        return format_double(v.get<double>());
    }
    throw ParseError("config key \"" + key + "\" must hold a string, number, boolean or array of these");
}

nlohmann::json typed_value(const std::string& text) {
    if (text == "true") {
        return true;
    }
    if (text == "false") {
        return false;
    }
    long long i = 0;
    auto [ip, iec] = std::from_chars(text.data(), text.data() + text.size(), i);
    if (iec == std::errc() && ip == text.data() + text.size()) {
        return i;
    }
    double d = 0.0;
    auto [dp, dec] = std::from_chars(text.data(), text.data() + text.size(), d);
    if (dec == std::errc() && dp == text.data() + text.size()) {
        return d;
    }
    return text;
}

std::string fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

std::vector<std::string> expand_config_args(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config_path;
    std::set<std::string> given;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string name = flag_name(args[i]);
        if (name.empty()) {
            continue;
        }
        given.insert(name);
        if (name == "config") {
            const auto eq = args[i].find('=');
            if (eq != std::string::npos) {
                config_path = args[i].substr(eq + 1);
            } else if (i + 1 < args.size()) {
                config_path = args[i + 1];
            }
        }
    }
    if (config_path.empty() || args.empty()) {
        return args;
    }

    const auto config = read_json_file(config_path);
    if (!config.is_object()) {
        throw ParseError(config_path + ": config must be a JSON object keyed by flag name");
    }
    std::vector<std::string> extra;
    for (const auto& [key, value] : config.items()) {
        if (given.count(key) || key == "config") {
            continue;
        }
        if (value.is_boolean()) {
            if (value.get<bool>()) {
                extra.push_back("--" + key);
            }
        } else if (value.is_array()) {
            extra.push_back("--" + key);
            for (const auto& item : value) {
                extra.push_back(scalar_token(item, key));
            }
        } else if (!value.is_null()) {
            extra.push_back("--" + key);
            extra.push_back(scalar_token(value, key));
        }
    }
    const auto sub = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a.rfind('-', 0) != 0; });
    const auto at = sub == args.end() ? args.begin() : sub + 1;
    args.insert(at, extra.begin(), extra.end());
    return args;
}

nlohmann::json config_snapshot(const CLI::App& command) {
    nlohmann::json out = nlohmann::json::object();
    out["command"] = command.get_name();
    for (const CLI::Option* opt : command.get_options()) {
        if (opt->get_lnames().empty()) {
            continue;
        }
        const std::string& name = opt->get_lnames().front();
        if (name == "help" || name == "config" || name == "out-dir") {
            continue;
        }
        if (opt->get_expected_max() == 0) {
            out[name] = opt->count() > 0;
            continue;
        }
        if (opt->count() > 0) {
            const auto& results = opt->results();
            if (opt->get_expected_max() > 1) {
                nlohmann::json arr = nlohmann::json::array();
                for (const auto& r : results) {
                    arr.push_back(typed_value(r));
                }
                out[name] = arr;
            } else {
                out[name] = typed_value(results.back());
            }
        } else if (!opt->get_default_str().empty()) {
            out[name] = typed_value(opt->get_default_str());
        } else {
            out[name] = nullptr;
        }
    }
    return out;
}

void add_model_options(CLI::App& command, ModelSource& source, bool required) {
    auto* m = command.add_option("--model", source.model,
                                 "linear:<file> | table:<file> | bayes:<problem> | exec:<command>");
    if (required) {
        m->required();
    }
    command.add_option("--miscalibrate", source.miscalibrate, "Scale the model's logits by this factor")
        ->check(CLI::PositiveNumber);
    command.add_option("--workers", source.workers, "Worker processes for exec: models")->check(CLI::Range(1, 64));
    command.add_option("--timeout", source.timeout, "Per-request timeout in seconds for exec: models")
        ->check(CLI::PositiveNumber);
}

ModelHandle load_model(const ModelSource& source) {
    const auto colon = source.model.find(':');
    if (colon == std::string::npos) {
        throw InvalidInput("--model must look like kind:argument, got \"" + source.model + "\"");
    }
    const std::string kind = source.model.substr(0, colon);
    const std::string arg = source.model.substr(colon + 1);
    ModelHandle model;
    if (kind == "linear") {
        model = load_linear_model(arg);
    } else if (kind == "table") {
        model = load_table_model(arg);
    } else if (kind == "bayes") {
        model = std::make_shared<BayesSubsetModel>(load_problem(arg));
    } else if (kind == "exec") {
        ExternalModelOptions opts;
        opts.command = arg;
        opts.workers = source.workers;
        opts.timeout_seconds = source.timeout;
        model = std::make_shared<ExternalModelClient>(opts);
    } else {
        throw InvalidInput("unknown model kind \"" + kind + "\" (expected linear, table, bayes or exec)");
    }
    if (source.miscalibrate != 1.0) {
        model = std::make_shared<MiscalibrationWrapper>(model, source.miscalibrate);
    }
    return model;
}

PerturbationSpec load_perturbation_spec(const std::string& groups_path, std::size_t features) {
    if (groups_path.empty()) {
        return PerturbationSpec::zeros(features);
    }
    const auto j = read_json_file(groups_path);
    nlohmann::json spec_json;
    if (j.is_array()) {
        spec_json = {{"baseline", std::vector<double>(features, 0.0)}, {"groups", j}};
    } else if (j.is_object()) {
        spec_json = j;
        if (!spec_json.contains("baseline")) {
            spec_json["baseline"] = std::vector<double>(features, 0.0);
        }
    } else {
        throw ParseError(groups_path + ": expected an array of groups or an object");
    }
    auto spec = PerturbationSpec::from_json(spec_json);
    if (spec.feature_count() != features) {
        throw InvalidInput(groups_path + ": baseline has " + std::to_string(spec.feature_count()) +
                           " features, model has " + std::to_string(features));
    }
    return spec;
}

std::string calibration_svg(const CalibrationReport& report) {
    constexpr double kLeft = 80.0, kRight = 770.0, kTop = 40.0, kBottom = 430.0;
    double y_max = 0.0;
    for (const auto& r : report.rows) {
        y_max = std::max({y_max, r.ce_before, r.ce_after});
    }
    if (y_max <= 0.0) {
        y_max = 1.0;
    }
    auto px = [&](double level) { return kLeft + level * (kRight - kLeft); };
    auto py = [&](double ce) { return kBottom - ce / y_max * (kBottom - kTop); };

    auto polyline = [&](bool before, const char* colour) {
        std::string pts;
        for (const auto& r : report.rows) {
            if (r.n == 0) {
                continue;
            }
            const double mid = 0.5 * (r.bin_lo + r.bin_hi);
            pts += fixed(px(mid)) + "," + fixed(py(before ? r.ce_before : r.ce_after)) + " ";
        }
        if (!pts.empty()) {
            pts.pop_back();
        }
        return std::string("  <polyline fill=\"none\" stroke=\"") + colour + "\" stroke-width=\"2\" points=\"" + pts +
               "\"/>\n";
    };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 500\" width=\"800\" height=\"500\">\n";
    svg += "  <rect width=\"800\" height=\"500\" fill=\"white\"/>\n";
    svg += "  <line x1=\"" + fixed(kLeft) + "\" y1=\"" + fixed(kBottom) + "\" x2=\"" + fixed(kRight) + "\" y2=\"" +
           fixed(kBottom) + "\" stroke=\"black\"/>\n";
    svg += "  <line x1=\"" + fixed(kLeft) + "\" y1=\"" + fixed(kTop) + "\" x2=\"" + fixed(kLeft) + "\" y2=\"" +
           fixed(kBottom) + "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double level = t / 4.0;
        svg += "  <text x=\"" + fixed(px(level)) + "\" y=\"450\" font-size=\"12\" text-anchor=\"middle\">" +
               fixed(level) + "</text>\n";
        const double ce = y_max * t / 4.0;
        svg += "  <text x=\"72\" y=\"" + fixed(py(ce) + 4.0) + "\" font-size=\"12\" text-anchor=\"end\">" +
               format_double(std::round(ce * 1e4) / 1e4) + "</text>\n";
    }
    svg += "  <text x=\"425\" y=\"480\" font-size=\"14\" text-anchor=\"middle\">perturbation level</text>\n";
    svg += "  <text x=\"20\" y=\"235\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 20 235)\">"
           "calibration error (KL)</text>\n";
    svg += polyline(true, "#d62728");
    svg += polyline(false, "#1f77b4");
    svg += "  <text x=\"640\" y=\"60\" font-size=\"12\" fill=\"#d62728\">before</text>\n";
    svg += "  <text x=\"640\" y=\"78\" font-size=\"12\" fill=\"#1f77b4\">after</text>\n";
    svg += "</svg>\n";
    return svg;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

}  // namespace recalx::cli
