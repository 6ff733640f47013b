#include "cli.hpp"

#include "saesteer/saesteer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace saesteer::cli {
namespace {

const char *const files_group = "Files";

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::vector<int> parse_int_list(const std::string &s) {
    std::vector<int> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception &) {
            throw usage_error("'" + item + "' is not an integer");
        }
    }
    return out;
}

std::vector<std::vector<int>> parse_layer_sets(const std::string &s) {
    std::vector<std::vector<int>> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ';');)
        if (!item.empty()) out.push_back(parse_int_list(item));
    if (out.empty()) throw usage_error("no layer sets given");
    return out;
}

std::string read_text(const fs::path &p) {
    const auto bytes = read_file_bytes(p);
    return {bytes.begin(), bytes.end()};
}

json read_json(const fs::path &p) {
    try {
        return json::parse(read_text(p));
    } catch (const json::parse_error &e) {
        throw data_error("invalid JSON in " + p.string() + ": " + e.what());
    }
}

std::vector<json> read_jsonl(const fs::path &p) {
    std::vector<json> out;
    std::istringstream in(read_text(p));
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error &e) {
            throw data_error(p.string() + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
        }
    }
    return out;
}

// Files are enumerated in name order so directory checksums are stable.
std::vector<fs::path> files_in(const fs::path &dir) {
    if (!fs::is_directory(dir)) throw data_error("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto &e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "run_manifest.json") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::uint64_t checksum_of(const fs::path &p) {
    if (fs::is_directory(p)) {
        std::uint64_t h = fnv1a64(std::string_view("dir"));
        for (const auto &f : files_in(p)) {
            h = fnv1a64(f.filename().string(), h);
            h = fnv1a64(read_file_bytes(f), h);
        }
        return h;
    }
    return fnv1a64(read_file_bytes(p));
}

// Per-invocation state: the manifest is assembled as inputs are read and
// outputs are written.
struct run_state {
    std::ostream &out;
    std::ostream &err;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string out_path;
    std::string log_level = "info";
    std::string command;
    json config = json::object();
    std::map<std::string, std::string> inputs;
    std::map<std::string, std::string> outputs;

    run_state(std::ostream &o, std::ostream &e) : out(o), err(e) {}

    void input(const fs::path &p) {
        if (!fs::exists(p)) throw data_error("missing input: " + p.string());
        inputs[p.filename().string()] = hex64(checksum_of(p));
    }
    void write(const fs::path &p, const std::string &text) {
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        write_file_bytes(p, std::span<const unsigned char>(reinterpret_cast<const unsigned char *>(text.data()),
                                                          text.size()));
        outputs[p.filename().string()] = hex64(fnv1a64(text));
    }
    void write(const fs::path &p, std::span<const unsigned char> bytes) {
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        write_file_bytes(p, bytes);
        outputs[p.filename().string()] = hex64(fnv1a64(bytes));
    }
    void write_json(const fs::path &p, const json &j) { write(p, j.dump(2) + "\n"); }
    void info(const std::string &msg) const {
        if (log_level != "quiet") err << msg << "\n";
    }
    void warn(const std::string &msg) const {
        if (log_level != "quiet") err << "warning: " << msg << "\n";
    }
    fs::path out_dir() const {
        if (out_path.empty()) throw usage_error("--out is required");
        return out_path;
    }
    fs::path out_file() const {
        if (out_path.empty()) throw usage_error("--out is required");
        return out_path;
    }
    void write_manifest(const fs::path &where) {
        json m = json::object();
        m["tool"] = "saesteer";
        m["version"] = std::string(version);
        m["command"] = command;
        m["config"] = config;
        m["config_hash"] = hex64(fnv1a64(command + "\n" + config.dump()));
        m["inputs"] = inputs;
        m["outputs"] = outputs;
        const auto text = m.dump(2) + "\n";
        write_file_bytes(where, std::span<const unsigned char>(reinterpret_cast<const unsigned char *>(text.data()),
                                                              text.size()));
    }
};

// Everything needed to decode a toy study set. The generator keeps a
// reference to the world, so the struct is not movable once built.
struct toy_inputs {
    toy_world world;
    std::vector<toy_study> studies;
    std::unique_ptr<toy_generator> gen;
    std::unique_ptr<toy_oracle> oracle;
    std::unique_ptr<toy_scorer> scorer;

    std::vector<std::string> ids() const {
        std::vector<std::string> v;
        for (const auto &s : studies) v.push_back(s.study_id);
        return v;
    }
};

std::unique_ptr<toy_inputs> load_inputs(run_state &st, const fs::path &path) {
    fs::path p = path;
    if (fs::is_directory(p)) p /= "studies.json";
    st.input(p);
    const auto j = read_json(p);
    if (!j.is_object() || !j.contains("world") || !j.contains("studies"))
        throw data_error("study set " + p.string() + " needs 'world' and 'studies'");
    auto in = std::make_unique<toy_inputs>();
    in->world = j.at("world").get<toy_world>();
    for (const auto &s : j.at("studies")) {
        auto study = s.get<toy_study>();
        for (const auto &roles : study.slot_roles)
            for (const auto &[a, _] : roles)
                if (a >= in->world.config.atom_count) throw data_error("study " + study.study_id + " names a bad atom");
        in->studies.push_back(std::move(study));
    }
    in->gen = std::make_unique<toy_generator>(in->world, in->studies);
    in->oracle = std::make_unique<toy_oracle>(*in->gen);
    in->scorer = std::make_unique<toy_scorer>(*in->gen);
    return in;
}

std::vector<activation_shard> load_layer_shards(run_state &st, const fs::path &dir, int layer) {
    st.input(dir);
    std::vector<activation_shard> out;
    for (const auto &f : files_in(dir)) {
        if (f.extension() != ".bin") continue;
        auto shard = read_shard(f);
        if (int(shard.layer()) == layer) out.push_back(std::move(shard));
    }
    if (out.empty()) throw data_error("no layer-" + std::to_string(layer) + " shards in " + dir.string());
    return out;
}

sae_model load_sae(run_state &st, const fs::path &p) {
    st.input(p);
    return load_checkpoint(p);
}

sae_by_layer load_saes(run_state &st, const fs::path &dir, const std::set<int> &layers) {
    sae_by_layer out;
    for (int l : layers) {
        const auto p = dir / ("sae_l" + std::to_string(l) + ".bin");
        if (!fs::exists(p)) throw data_error("missing input: " + p.string());
        out[l] = load_sae(st, p);
    }
    return out;
}

json report_json(const generation &g) { return {{"study_id", g.study_id}, {"tokens", g.tokens}, {"text", g.text()}}; }

std::string reports_jsonl(const std::vector<generation> &gens) {
    std::string s;
    for (const auto &g : gens) s += report_json(g).dump() + "\n";
    return s;
}

std::vector<generation> read_reports(run_state &st, const fs::path &p) {
    st.input(p);
    std::vector<generation> out;
    for (const auto &j : read_jsonl(p)) {
        if (!j.is_object() || !j.contains("study_id") || !j.contains("tokens"))
            throw data_error("report record needs study_id and tokens");
        out.push_back({j.at("study_id").get<std::string>(), j.at("tokens").get<std::vector<std::string>>()});
    }
    return out;
}

// Options in the Files group and the run-shape globals stay out of the
// config hash, so moving artifacts or changing the worker count does not
// change the manifest.
json options_config(const CLI::App *sub) {
    json c = json::object();
    for (const auto *opt : sub->get_options()) {
        if (opt->get_group() == files_group || opt->get_name() == "--help" || opt->get_name().empty()) continue;
        const std::string key = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
        if (opt->count() > 0) {
            const auto &r = opt->results();
            std::string joined;
            for (std::size_t i = 0; i < r.size(); ++i) joined += (i ? "," : "") + r[i];
            c[key] = joined;
        } else {
            c[key] = opt->get_default_str();
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Subcommands.

struct make_opts {
    std::size_t d = 64, dict = 96, k = 4;
    double noise = 0.0, threshold = 0.5, incidental = 1.2, rate_high = 0.35, rate_low = 0.05, guard_rate = 0.5;
    std::string drivers = "FF:1,MF:1", guards = "MF:1,WL:1", layers = "8,16,20,24";
    bool no_repetition = false;
};

void cmd_toyworld_make(run_state &st, const make_opts &o) {
    toy_config c;
    c.hidden_dim = o.d;
    c.atom_count = o.dict;
    c.background_k = o.k;
    c.noise = o.noise;
    c.drivers = parse_role_specs(o.drivers);
    c.guards = parse_role_specs(o.guards);
    c.repetition = !o.no_repetition;
    c.layers = parse_int_list(o.layers);
    c.seed = st.seed;
    c.threshold = o.threshold;
    c.incidental_threshold = o.incidental;
    c.driver_rate_high = o.rate_high;
    c.driver_rate_low = o.rate_low;
    c.guard_rate = o.guard_rate;
    try {
        validate_config(c);
    } catch (const data_error &e) {
        throw usage_error(e.what());
    }
    const auto w = generate_world(c);
    const auto out = st.out_file();
    st.write_json(out, w);
    st.write_manifest(out.string() + ".manifest.json");
}

struct studies_opts {
    std::string world;
    std::size_t count = 200;
    double high_fraction = 0.5, repetition_rate = 0.2;
};

void cmd_toyworld_studies(run_state &st, const studies_opts &o) {
    st.input(o.world);
    const auto w = read_json(o.world).get<toy_world>();
    const auto studies = make_studies(w, o.count, st.seed, o.high_fraction, o.repetition_rate);
    json j = {{"world", w}, {"studies", studies}};
    const auto out = st.out_file();
    st.write_json(out, j);
    st.write_manifest(out.string() + ".manifest.json");
}

struct collect_opts {
    std::string in, layers = "8,16,20,24";
    std::size_t max_tokens = 512, sample = 0, min_per_group = 1;
};

void cmd_collect(run_state &st, const collect_opts &o) {
    const auto in = load_inputs(st, o.in);
    const auto layers = parse_int_list(o.layers);
    if (o.max_tokens == 0) throw usage_error("--max-tokens must be positive");

    sample_manifest manifest;
    manifest.seed = st.seed;
    for (const auto &[group, _] : strata_of(in->studies)) manifest.groups.push_back(group);
    for (const auto &s : in->studies) manifest.studies[s.study_id].group = s.stratum;
    std::vector<std::string> ids = in->ids();
    if (o.sample > 0) {
        auto picked = stratified_sample(manifest, o.sample, o.min_per_group);
        for (const auto &w : picked.warnings) st.warn(w);
        std::sort(picked.study_ids.begin(), picked.study_ids.end());
        ids = picked.study_ids;
        std::map<std::string, sample_manifest::study_entry> kept;
        for (const auto &id : ids) kept[id] = manifest.studies.at(id);
        manifest.studies = std::move(kept);
    }
    const auto shards = collect_activations(*in->gen, ids, layers, o.max_tokens, st.threads);
    const auto dir = st.out_dir();
    fs::create_directories(dir);
    for (const auto &[layer, shard] : shards) {
        const std::string name = "layer_" + std::to_string(layer) + ".bin";
        const auto bytes = encode_shard(shard);
        st.write(dir / name, bytes);
        manifest.shards.push_back({name, static_cast<std::uint32_t>(layer), shard.size(), fnv1a64(bytes)});
        for (std::size_t r = 0; r < shard.size(); ++r)
            if (shard.key(r).token_position == 0)
                manifest.studies[shard.key(r).study_id].layers[static_cast<std::uint32_t>(layer)] = {
                    name, row_byte_offset(shard, r)};
    }
    manifest.validate();
    st.write_json(dir / "shards.json", manifest);
    st.write_manifest(dir / "run_manifest.json");
}

struct train_opts {
    std::string shards;
    int layer = 16;
    std::size_t dict = 512, k = 8, epochs = 10, batch = 256;
    double lr = 1e-3, holdout = 0.05;
};

void cmd_train(run_state &st, const train_opts &o) {
    const auto shards = load_layer_shards(st, o.shards, o.layer);
    train_config c;
    c.dict_size = o.dict;
    c.k = o.k;
    c.epochs = o.epochs;
    c.batch_size = o.batch;
    c.learning_rate = o.lr;
    c.holdout_fraction = o.holdout;
    c.seed = st.seed;
    c.threads = st.threads;
    if (!(o.lr > 0) || !(o.holdout >= 0 && o.holdout < 1)) throw usage_error("invalid learning rate or holdout");
    const auto rows = rows_of(shards);
    auto result = train(rows, c);
    const auto out = st.out_file();
    st.write(out, encode_checkpoint(result.model));
    json q = result.report;
    q["layer"] = o.layer;
    q["epoch_loss"] = result.epoch_loss;
    q["steps"] = result.steps;
    q["config"] = c;
    auto qpath = out;
    qpath.replace_extension(".quality.json");
    st.write_json(qpath, q);
    st.info("trained layer " + std::to_string(o.layer) + ": cosine " + std::to_string(result.report.mean_cosine) +
            ", dead " + std::to_string(result.report.dead_fraction));
    st.write_manifest(out.string() + ".manifest.json");
}

struct panel_opts {
    std::string inputs, shards, sae;
    int layer = 16;
    std::size_t n = 40, keep = 100;
    double word_f1 = -1;
};

void cmd_panel(run_state &st, const panel_opts &o) {
    const auto in = load_inputs(st, o.inputs);
    const auto sae = load_sae(st, o.sae);
    const auto shards = load_layer_shards(st, o.shards, o.layer);
    std::map<std::string, double> badness, word_f1;
    for (const auto &id : in->ids()) {
        const auto g = in->gen->generate(id, {});
        const auto c = in->oracle->count(g);
        badness[id] = double(c.ff) + c.mf + c.wl + c.ws;
        word_f1[id] = *in->scorer->score(g).bertscore / 100.0;
    }
    std::map<std::string, std::vector<double>> means;
    for (const auto &s : shards)
        for (auto &[id, v] : study_mean_codes(sae, s)) means[id] = std::move(v);
    std::map<std::string, double> screened_errors;
    for (const auto &[id, _] : means) screened_errors[id] = badness.at(id);
    const auto candidates = prefilter(means, screened_errors, o.keep);
    auto panel = compose_panel(badness, o.n, st.seed);
    if (o.word_f1 >= 0) panel = filter_panel_by_word_f1(panel, word_f1, o.word_f1);
    if (panel.empty()) throw data_error("panel is empty after filtering");
    const auto out = st.out_file();
    const fs::path base = out.has_parent_path() ? out.parent_path() : fs::path(".");
    json j = {{"studies", fs::relative(fs::absolute(o.inputs), fs::absolute(base)).generic_string()},
              {"layer", o.layer},
              {"study_ids", panel},
              {"candidates", candidates}};
    st.write_json(out, j);
    st.write_manifest(out.string() + ".manifest.json");
}

struct screen_opts {
    std::string sae, panel, mode = "zero", lists;
    double amplify_beta = 1.0;
};

void cmd_screen(run_state &st, const screen_opts &o) {
    const auto sae = load_sae(st, o.sae);
    st.input(o.panel);
    const auto pj = read_json(o.panel);
    for (const char *k : {"studies", "layer", "study_ids"})
        if (!pj.contains(k)) throw data_error(std::string("panel missing '") + k + "'");
    const fs::path panel_dir = fs::path(o.panel).has_parent_path() ? fs::path(o.panel).parent_path() : ".";
    const auto in = load_inputs(st, panel_dir / pj.at("studies").get<std::string>());
    const int layer = pj.at("layer").get<int>();
    const auto panel = pj.at("study_ids").get<std::vector<std::string>>();
    std::vector<std::size_t> candidates;
    if (pj.contains("candidates")) {
        candidates = pj.at("candidates").get<std::vector<std::size_t>>();
    } else {
        candidates.resize(sae.dict_size);
        std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    }
    screen_options so;
    so.mode = parse_ablation_mode(o.mode);
    so.amplify_beta = o.amplify_beta;
    so.threads = st.threads;
    const auto table = causal_screen(sae, layer, panel, *in->gen, *in->oracle, candidates, so);
    for (const auto &[j, why] : table.failures) st.warn("candidate " + std::to_string(j) + " failed: " + why);
    const auto out = st.out_file();
    st.write_json(out, table);
    fs::path lists = o.lists;
    if (lists.empty()) lists = (out.has_parent_path() ? out.parent_path() : fs::path(".")) /
                               ("lists_l" + std::to_string(layer) + ".json");
    st.write_json(lists, build_ranked_lists(table));
    st.write_manifest(out.string() + ".manifest.json");
}

std::map<int, ranked_feature_lists> load_lists(run_state &st, const fs::path &dir, const std::set<int> &layers) {
    std::map<int, ranked_feature_lists> out;
    for (int l : layers) {
        const auto p = dir / ("lists_l" + std::to_string(l) + ".json");
        st.input(p);
        auto lists = read_json(p).get<ranked_feature_lists>();
        if (lists.layer != l) throw data_error(p.string() + " holds layer " + std::to_string(lists.layer));
        out[l] = std::move(lists);
    }
    return out;
}

struct grid_opts {
    std::string inputs, saes, lists, plan_out, alphas = "0.1,0.2,0.3,0.4,0.5", kbudgets = "20,50,100",
                                                betas = "1.0", modes = "residual", selections = "combined",
                                                layer_sets = "8,16,20,24";
    std::size_t limit = 0;
};

std::vector<double> parse_double_list(const std::string &s) {
    std::vector<double> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception &) {
            throw usage_error("'" + item + "' is not a number");
        }
    }
    if (out.empty()) throw usage_error("empty number list");
    return out;
}

std::vector<std::string> split_words(const std::string &s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

void cmd_grid(run_state &st, const grid_opts &o) {
    const auto in = load_inputs(st, o.inputs);
    grid_spec spec;
    spec.alphas = parse_double_list(o.alphas);
    spec.k_budgets.clear();
    for (int k : parse_int_list(o.kbudgets)) {
        if (k <= 0) throw usage_error("K budgets must be positive");
        spec.k_budgets.push_back(std::size_t(k));
    }
    spec.betas = parse_double_list(o.betas);
    spec.modes.clear();
    for (const auto &m : split_words(o.modes)) spec.modes.push_back(parse_steering_mode(m));
    spec.selections.clear();
    for (const auto &s : split_words(o.selections)) spec.selections.push_back(parse_list_selection(s));
    spec.layer_sets = parse_layer_sets(o.layer_sets);
    spec.threads = st.threads;
    for (double a : spec.alphas)
        if (a < 0 || a > 1) throw usage_error("alphas must lie in [0, 1]");
    std::set<int> layers;
    for (const auto &ls : spec.layer_sets) layers.insert(ls.begin(), ls.end());
    const auto saes = load_saes(st, o.saes, layers);
    const auto lists = load_lists(st, o.lists, layers);
    auto ids = in->ids();
    if (o.limit > 0 && o.limit < ids.size()) ids.resize(o.limit);
    const auto result = grid_search(spec, lists, saes, *in->gen, *in->scorer, *in->oracle, ids);
    const auto out = st.out_file();
    st.write_json(out, result);
    const auto best = plan_for(result.rows[result.best], lists);
    for (const auto &w : best.warnings()) st.warn(w);
    fs::path plan_out = o.plan_out;
    if (plan_out.empty()) plan_out = (out.has_parent_path() ? out.parent_path() : fs::path(".")) / "best_plan.json";
    st.write_json(plan_out, best);
    st.write_manifest(out.string() + ".manifest.json");
}

struct steer_opts {
    std::string plan, saes, inputs;
};

void cmd_steer(run_state &st, const steer_opts &o) {
    const auto in = load_inputs(st, o.inputs);
    steering_plan plan;
    plan.alpha = 0.0;
    sae_by_layer saes;
    if (!o.plan.empty()) {
        st.input(o.plan);
        plan = read_json(o.plan).get<steering_plan>();
        for (const auto &w : plan.warnings()) st.warn(w);
        std::set<int> layers;
        for (const auto &[l, _] : plan.layers) layers.insert(l);
        if (!layers.empty()) {
            if (o.saes.empty()) throw usage_error("--saes is required when the plan edits layers");
            saes = load_saes(st, o.saes, layers);
        }
    }
    const auto gens = steer_all(*in->gen, saes, plan, in->ids(), st.threads);
    const auto out = st.out_file();
    st.write(out, reports_jsonl(gens));
    st.write_manifest(out.string() + ".manifest.json");
}

struct score_opts {
    std::string pairs, baseline, steered, inputs, pairs_out, sided = "one";
    std::size_t bootstrap = 10000;
    bool exhaustive = false;
    double confidence = 0.95;
};

std::vector<sample_record> records_from(run_state &st, const fs::path &p, const toy_inputs *in) {
    st.input(p);
    std::vector<sample_record> out;
    for (const auto &j : read_jsonl(p)) {
        if (j.contains("tokens")) {
            if (!in) throw usage_error("scoring raw reports needs --inputs");
            const generation g{j.at("study_id").get<std::string>(), j.at("tokens").get<std::vector<std::string>>()};
            out.push_back({g.study_id, in->oracle->count(g), in->scorer->score(g)});
        } else {
            out.push_back(j.get<sample_record>());
        }
    }
    return out;
}

void cmd_score(run_state &st, const score_opts &o) {
    std::vector<std::pair<sample_record, sample_record>> pairs;
    if (!o.pairs.empty()) {
        if (!o.baseline.empty() || !o.steered.empty()) throw usage_error("use either --pairs or --baseline/--steered");
        st.input(o.pairs);
        for (const auto &j : read_jsonl(o.pairs)) {
            if (!j.contains("baseline") || !j.contains("steered"))
                throw data_error("pair record needs baseline and steered");
            auto b = j.at("baseline").get<sample_record>();
            auto s = j.at("steered").get<sample_record>();
            if (j.contains("study_id")) b.study_id = s.study_id = j.at("study_id").get<std::string>();
            pairs.push_back({b, s});
        }
    } else {
        if (o.baseline.empty() || o.steered.empty()) throw usage_error("need --pairs or both --baseline and --steered");
        std::unique_ptr<toy_inputs> in;
        if (!o.inputs.empty()) in = load_inputs(st, o.inputs);
        const auto base = records_from(st, o.baseline, in.get());
        const auto steer = records_from(st, o.steered, in.get());
        std::map<std::string, const sample_record *> by_id;
        for (const auto &r : steer)
            if (!by_id.emplace(r.study_id, &r).second) throw data_error("duplicate study " + r.study_id);
        if (base.size() != steer.size()) throw data_error("baseline and steered files hold different studies");
        for (const auto &b : base) {
            auto it = by_id.find(b.study_id);
            if (it == by_id.end()) throw data_error("study " + b.study_id + " has no steered record");
            pairs.push_back({b, *it->second});
        }
    }
    if (pairs.empty()) throw data_error("no paired records");
    const auto sided = o.sided == "one"   ? test_sidedness::one_sided
                       : o.sided == "two" ? test_sidedness::two_sided
                                          : throw usage_error("--sided must be one or two");
    bootstrap_options bo;
    bo.resamples = o.bootstrap;
    bo.seed = st.seed;
    bo.exhaustive = o.exhaustive;
    bo.confidence = o.confidence;
    bo.threads = st.threads;

    std::vector<std::pair<error_counts, error_counts>> counts;
    for (const auto &[b, s] : pairs) counts.push_back({b.counts, s.counts});
    json result = json::object();
    result["n"] = pairs.size();
    result["sided"] = o.sided;
    result["breakdown"] = per_type_breakdown(counts);
    json metrics = json::object();
    auto metric = [&](const std::string &key, auto get) {
        std::vector<double> bv, sv;
        for (const auto &[b, s] : pairs) {
            const auto x = get(b), y = get(s);
            if (!x || !y) return;
            bv.push_back(*x);
            sv.push_back(*y);
        }
        double bm = 0, sm = 0;
        for (std::size_t i = 0; i < bv.size(); ++i) {
            bm += bv[i];
            sm += sv[i];
        }
        json m = {{"baseline", bm / double(bv.size())}, {"steered", sm / double(sv.size())}};
        if (bv.size() >= 2) m["test"] = paired_bootstrap(bv, sv, bo, sided);
        metrics[key] = m;
    };
    auto has_all = [](const sample_record &r) { return r.scores.green && r.scores.radgraph && r.scores.chexbert && r.scores.bertscore; };
    metric("composite", [&](const sample_record &r) -> std::optional<double> {
        return has_all(r) ? std::optional<double>(composite(r.scores)) : std::nullopt;
    });
    metric("green_from_counts", [](const sample_record &r) -> std::optional<double> { return 100.0 * green_score(r.counts); });
    metric("green", [](const sample_record &r) { return r.scores.green; });
    metric("radgraph", [](const sample_record &r) { return r.scores.radgraph; });
    metric("chexbert", [](const sample_record &r) { return r.scores.chexbert; });
    metric("bertscore", [](const sample_record &r) { return r.scores.bertscore; });
    metric("bleu4", [](const sample_record &r) { return r.scores.bleu4; });
    metric("rougel", [](const sample_record &r) { return r.scores.rougel; });
    metric("radcliq", [](const sample_record &r) { return r.scores.radcliq; });
    result["metrics"] = metrics;
    const auto out = st.out_file();
    st.write_json(out, result);
    if (!o.pairs_out.empty()) {
        std::string lines;
        for (const auto &[b, s] : pairs) lines += json{{"study_id", b.study_id}, {"baseline", b}, {"steered", s}}.dump() + "\n";
        st.write(o.pairs_out, lines);
    }
    st.write_manifest(out.string() + ".manifest.json");
}

struct census_opts {
    std::string model_a, model_b, layers = "8,16,20,24";
    std::size_t n = default_consensus_size, boot = 10000;
    bool exhaustive = false, paired = false;
    double confidence = 0.95;
};

std::map<int, causal_delta_table> load_tables(run_state &st, const fs::path &dir, const std::vector<int> &layers) {
    std::map<int, causal_delta_table> out;
    for (int l : layers) {
        const auto p = dir / ("deltas_l" + std::to_string(l) + ".json");
        st.input(p);
        auto t = read_json(p).get<causal_delta_table>();
        if (t.layer != l) throw data_error(p.string() + " holds layer " + std::to_string(t.layer));
        out[l] = std::move(t);
    }
    return out;
}

void cmd_census(run_state &st, const census_opts &o) {
    const auto layers = parse_int_list(o.layers);
    if (layers.empty()) throw usage_error("no layers given");
    if (o.n == 0) throw usage_error("--n must be positive");
    const auto a = census_of(load_tables(st, o.model_a, layers), o.n);
    const auto b = census_of(load_tables(st, o.model_b, layers), o.n);
    census_options co;
    co.boot.resamples = o.boot;
    co.boot.seed = st.seed;
    co.boot.exhaustive = o.exhaustive;
    co.boot.confidence = o.confidence;
    co.paired_difference = o.paired;
    const auto report = census_report(a, b, co);
    for (const auto &w : report.warnings) st.warn(w);
    json j = report;
    j["layers"] = layers;
    j["n"] = o.n;
    const auto out = st.out_file();
    st.write_json(out, j);
    st.write_manifest(out.string() + ".manifest.json");
}

struct profile_opts {
    std::string sae, shards, reports, features;
    int layer = 16;
    double threshold = default_profile_threshold;
    std::size_t top = 3;
};

void cmd_profile(run_state &st, const profile_opts &o) {
    const auto sae = load_sae(st, o.sae);
    const auto shards = load_layer_shards(st, o.shards, o.layer);
    std::map<std::string, generation> reports;
    for (auto &g : read_reports(st, o.reports)) reports[g.study_id] = g;
    std::vector<std::size_t> features;
    for (int f : parse_int_list(o.features)) {
        if (f < 0) throw usage_error("feature indices must be non-negative");
        features.push_back(std::size_t(f));
    }
    if (features.empty()) throw usage_error("--features is empty");
    if (o.top == 0) throw usage_error("--top must be at least 1");
    const auto profiles = profile_features(sae, shards, reports, features, o.threshold);
    std::map<std::size_t, std::vector<activation_context>> contexts;
    json j = json::object();
    j["layer"] = o.layer;
    j["threshold"] = o.threshold;
    j["features"] = json::array();
    for (const auto &p : profiles) {
        contexts[p.feature] = top_contexts(p, reports, o.top);
        json pj = p;
        pj["top_contexts"] = contexts[p.feature];
        j["features"].push_back(pj);
        if (p.inactive()) st.warn("feature " + std::to_string(p.feature) + " never exceeds the threshold");
    }
    const auto dir = st.out_dir();
    st.write(dir / "profile.tsv", profiles_tsv(profiles, contexts));
    st.write_json(dir / "profile.json", j);
    st.write_manifest(dir / "run_manifest.json");
}

void error_record(std::ostream &err, int code, const char *kind, const std::string &msg) {
    err << json{{"error", {{"code", code}, {"kind", kind}, {"message", msg}}}}.dump() << "\n";
}

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"SAE-based steering pipeline: collect, train-sae, panel, screen, grid, steer, score, census, "
                 "profile, toyworld",
                 "saesteer"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", std::string(version));

    run_state st(out, err);
    app.add_option("--seed", st.seed, "Global seed")->capture_default_str();
    app.add_option("--threads", st.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--out", st.out_path, "Output file or directory");
    app.add_option("--log-level", st.log_level, "info or quiet")
        ->capture_default_str()
        ->check(CLI::IsMember({"info", "quiet"}));

    std::function<void()> action;

    auto *tw = app.add_subcommand("toyworld", "Synthetic world utilities");
    tw->require_subcommand(1);
    make_opts mk;
    auto *mk_cmd = tw->add_subcommand("make", "Generate a planted world");
    mk_cmd->add_option("--d", mk.d, "Hidden dimension")->capture_default_str();
    mk_cmd->add_option("--dict", mk.dict, "Planted atom count")->capture_default_str();
    mk_cmd->add_option("--k", mk.k, "Background atoms per token")->capture_default_str();
    mk_cmd->add_option("--noise", mk.noise, "Noise scale")->capture_default_str();
    mk_cmd->add_option("--drivers", mk.drivers, "Error drivers, TYPE:COUNT list")->capture_default_str();
    mk_cmd->add_option("--guards", mk.guards, "Error guards, TYPE:COUNT list")->capture_default_str();
    mk_cmd->add_flag("--no-repetition", mk.no_repetition, "Omit the repetition atom");
    mk_cmd->add_option("--layers", mk.layers, "Hook layers")->capture_default_str();
    mk_cmd->add_option("--threshold", mk.threshold, "Injection threshold")->capture_default_str();
    mk_cmd->add_option("--incidental", mk.incidental, "Incidental-finding threshold")->capture_default_str();
    mk_cmd->add_option("--rate-high", mk.rate_high, "Driver rate, high-risk studies")->capture_default_str();
    mk_cmd->add_option("--rate-low", mk.rate_low, "Driver rate, low-risk studies")->capture_default_str();
    mk_cmd->add_option("--guard-rate", mk.guard_rate, "Guard rate")->capture_default_str();
    mk_cmd->callback([&] { action = [&] { cmd_toyworld_make(st, mk); }; });

    studies_opts so;
    auto *so_cmd = tw->add_subcommand("studies", "Generate a study set for a world");
    so_cmd->add_option("--world", so.world, "World JSON")->required()->group(files_group);
    so_cmd->add_option("--count", so.count, "Number of studies")->capture_default_str();
    so_cmd->add_option("--high-fraction", so.high_fraction, "Share of high-risk studies")->capture_default_str();
    so_cmd->add_option("--repetition-rate", so.repetition_rate, "Share of repetitive studies")->capture_default_str();
    so_cmd->callback([&] { action = [&] { cmd_toyworld_studies(st, so); }; });

    collect_opts co;
    auto *co_cmd = app.add_subcommand("collect", "Record per-layer hidden states into shards");
    co_cmd->add_option("--in", co.in, "Study set (file or directory holding studies.json)")->required()->group(files_group);
    co_cmd->add_option("--layers", co.layers, "Layers to record")->capture_default_str();
    co_cmd->add_option("--max-tokens", co.max_tokens, "Tokens kept per report")->capture_default_str();
    co_cmd->add_option("--sample", co.sample, "Stratified sample size (0 = all studies)")->capture_default_str();
    co_cmd->add_option("--min-per-group", co.min_per_group, "Floor per stratum")->capture_default_str();
    co_cmd->callback([&] { action = [&] { cmd_collect(st, co); }; });

    train_opts to;
    auto *to_cmd = app.add_subcommand("train-sae", "Train a Top-K SAE on one layer");
    to_cmd->add_option("--shards", to.shards, "Shard directory")->required()->group(files_group);
    to_cmd->add_option("--layer", to.layer, "Layer")->capture_default_str();
    to_cmd->add_option("--dict", to.dict, "Dictionary size")->capture_default_str();
    to_cmd->add_option("--k", to.k, "Active features per token")->capture_default_str();
    to_cmd->add_option("--epochs", to.epochs, "Epochs")->capture_default_str();
    to_cmd->add_option("--batch", to.batch, "Batch size")->capture_default_str();
    to_cmd->add_option("--lr", to.lr, "Learning rate")->capture_default_str();
    to_cmd->add_option("--holdout", to.holdout, "Held-out fraction for the quality report")->capture_default_str();
    to_cmd->callback([&] { action = [&] { cmd_train(st, to); }; });

    panel_opts po;
    auto *po_cmd = app.add_subcommand("panel", "Compose a screening panel and prefilter candidates");
    po_cmd->add_option("--inputs", po.inputs, "Study set")->required()->group(files_group);
    po_cmd->add_option("--shards", po.shards, "Shard directory")->required()->group(files_group);
    po_cmd->add_option("--sae", po.sae, "SAE checkpoint")->required()->group(files_group);
    po_cmd->add_option("--layer", po.layer, "Layer")->capture_default_str();
    po_cmd->add_option("--n", po.n, "Panel size")->capture_default_str();
    po_cmd->add_option("--keep", po.keep, "Prefilter size")->capture_default_str();
    po_cmd->add_option("--word-f1", po.word_f1, "Minimum baseline word-F1 (negative = off)")->capture_default_str();
    po_cmd->callback([&] { action = [&] { cmd_panel(st, po); }; });

    screen_opts sc;
    auto *sc_cmd = app.add_subcommand("screen", "Single-feature causal screen");
    sc_cmd->add_option("--sae", sc.sae, "SAE checkpoint")->required()->group(files_group);
    sc_cmd->add_option("--panel", sc.panel, "Panel JSON")->required()->group(files_group);
    sc_cmd->add_option("--mode", sc.mode, "zero or amplify")->capture_default_str();
    sc_cmd->add_option("--amplify-beta", sc.amplify_beta, "Amplify factor beta (feature scaled by 1+beta)")
        ->capture_default_str();
    sc_cmd->add_option("--lists", sc.lists, "Ranked-list output path")->group(files_group);
    sc_cmd->callback([&] { action = [&] { cmd_screen(st, sc); }; });

    grid_opts go;
    auto *go_cmd = app.add_subcommand("grid", "Grid search over steering operating points");
    go_cmd->add_option("--inputs", go.inputs, "Validation study set")->required()->group(files_group);
    go_cmd->add_option("--saes", go.saes, "Directory of sae_l<L>.bin")->required()->group(files_group);
    go_cmd->add_option("--lists", go.lists, "Directory of lists_l<L>.json")->required()->group(files_group);
    go_cmd->add_option("--plan-out", go.plan_out, "Best plan output path")->group(files_group);
    go_cmd->add_option("--alphas", go.alphas, "Alpha values")->capture_default_str();
    go_cmd->add_option("--kbudgets", go.kbudgets, "K budgets")->capture_default_str();
    go_cmd->add_option("--betas", go.betas, "Beta values")->capture_default_str();
    go_cmd->add_option("--modes", go.modes, "residual,blend")->capture_default_str();
    go_cmd->add_option("--selections", go.selections, "combined,suppress,boost")->capture_default_str();
    go_cmd->add_option("--layer-sets", go.layer_sets, "Semicolon-separated layer sets")->capture_default_str();
    go_cmd->add_option("--limit", go.limit, "Use only the first N studies (0 = all)")->capture_default_str();
    go_cmd->callback([&] { action = [&] { cmd_grid(st, go); }; });

    steer_opts se;
    auto *se_cmd = app.add_subcommand("steer", "Decode a study set under a steering plan");
    se_cmd->add_option("--plan", se.plan, "Steering plan (omit for unsteered)")->group(files_group);
    se_cmd->add_option("--saes", se.saes, "Directory of sae_l<L>.bin")->group(files_group);
    se_cmd->add_option("--inputs", se.inputs, "Study set")->required()->group(files_group);
    se_cmd->callback([&] { action = [&] { cmd_steer(st, se); }; });

    score_opts sr;
    auto *sr_cmd = app.add_subcommand("score", "Per-type breakdown and paired bootstrap");
    sr_cmd->add_option("--pairs", sr.pairs, "Paired JSON-lines records")->group(files_group);
    sr_cmd->add_option("--baseline", sr.baseline, "Baseline records or reports")->group(files_group);
    sr_cmd->add_option("--steered", sr.steered, "Steered records or reports")->group(files_group);
    sr_cmd->add_option("--inputs", sr.inputs, "Study set for scoring raw reports")->group(files_group);
    sr_cmd->add_option("--pairs-out", sr.pairs_out, "Write the scored pairs here")->group(files_group);
    sr_cmd->add_option("--bootstrap", sr.bootstrap, "Resamples")->capture_default_str();
    sr_cmd->add_flag("--exhaustive", sr.exhaustive, "Enumerate every resample");
    sr_cmd->add_option("--sided", sr.sided, "one or two")->capture_default_str();
    sr_cmd->add_option("--confidence", sr.confidence, "Interval level")->capture_default_str();
    sr_cmd->callback([&] { action = [&] { cmd_score(st, sr); }; });

    census_opts ce;
    auto *ce_cmd = app.add_subcommand("census", "Cross-model overlap of steering targets");
    ce_cmd->add_option("--model-a", ce.model_a, "Directory of deltas_l<L>.json")->required()->group(files_group);
    ce_cmd->add_option("--model-b", ce.model_b, "Directory of deltas_l<L>.json")->required()->group(files_group);
    ce_cmd->add_option("--layers", ce.layers, "Layers")->capture_default_str();
    ce_cmd->add_option("--n", ce.n, "Consensus set size")->capture_default_str();
    ce_cmd->add_option("--boot", ce.boot, "Bootstrap resamples")->capture_default_str();
    ce_cmd->add_flag("--exhaustive", ce.exhaustive, "Enumerate every resample");
    ce_cmd->add_flag("--paired", ce.paired, "Paired bootstrap on boost minus suppress");
    ce_cmd->add_option("--confidence", ce.confidence, "Interval level")->capture_default_str();
    ce_cmd->callback([&] { action = [&] { cmd_census(st, ce); }; });

    profile_opts pr;
    auto *pr_cmd = app.add_subcommand("profile", "Activation position profiles and top contexts");
    pr_cmd->add_option("--sae", pr.sae, "SAE checkpoint")->required()->group(files_group);
    pr_cmd->add_option("--shards", pr.shards, "Shard directory")->required()->group(files_group);
    pr_cmd->add_option("--reports", pr.reports, "Reports JSON-lines")->required()->group(files_group);
    pr_cmd->add_option("--layer", pr.layer, "Layer")->capture_default_str();
    pr_cmd->add_option("--features", pr.features, "Feature indices")->required();
    pr_cmd->add_option("--threshold", pr.threshold, "Pre-activation threshold")->capture_default_str();
    pr_cmd->add_option("--top", pr.top, "Contexts per feature")->capture_default_str();
    pr_cmd->callback([&] { action = [&] { cmd_profile(st, pr); }; });

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(std::move(rev));
    } catch (const CLI::Success &e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError &e) {
        error_record(err, exit_usage, "usage", e.what());
        return exit_usage;
    }

    try {
        const CLI::App *leaf = &app;
        for (;;) {
            const auto subs = leaf->get_subcommands();
            if (subs.empty()) break;
            leaf = subs.front();
            st.command += (st.command.empty() ? "" : " ") + leaf->get_name();
        }
        st.config = options_config(leaf);
        st.config["--seed"] = std::to_string(st.seed);
        if (!action) throw usage_error("no subcommand selected");
        action();
        return exit_ok;
    } catch (const usage_error &e) {
        error_record(err, exit_usage, "usage", e.what());
        return exit_usage;
    } catch (const numeric_error &e) {
        error_record(err, exit_numeric, "numeric", e.what());
        return exit_numeric;
    } catch (const data_error &e) {
        error_record(err, exit_data, "data", e.what());
        return exit_data;
    } catch (const json::exception &e) {
        error_record(err, exit_data, "data", e.what());
        return exit_data;
    } catch (const fs::filesystem_error &e) {
        error_record(err, exit_data, "data", e.what());
        return exit_data;
    }
}

} // namespace saesteer::cli
