#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "emcomm/config.hpp"
#include "emcomm/manifest.hpp"

using namespace emcomm;

namespace {

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

std::string expect_config_error(std::string_view text) {
    try {
        parse_config(text);
    } catch (const config_error& e) {
        return e.what();
    }
    ADD_FAILURE() << "no config_error for:\n" << text;
    return {};
}

} // namespace

TEST(Toml, ScalarsStringsAndArrays) {
    const auto j = parse_toml(R"(# comment
top = 1
[a]
int = -1_000
float = 2.5e-3
neg_inf = -inf
yes = true
no = false
s = "tab\there \"q\" \u00e9"
lit = 'C:\raw'
"quoted key" = 3
list = [1, 2.5,
  3,   # trailing comma and comment
]
nested = [[1, 2], [3, 4],]
empty = []
)");
    EXPECT_EQ(j["top"], 1);
    const auto& a = j["a"];
    EXPECT_EQ(a["int"], -1000);
    EXPECT_DOUBLE_EQ(a["float"].get<double>(), 2.5e-3);
    EXPECT_TRUE(std::isinf(a["neg_inf"].get<double>()));
    EXPECT_EQ(a["yes"], true);
    EXPECT_EQ(a["no"], false);
    EXPECT_EQ(a["s"], "tab\there \"q\" \xc3\xa9");
    EXPECT_EQ(a["lit"], "C:\\raw");
    EXPECT_EQ(a["quoted key"], 3);
    EXPECT_EQ(a["list"].size(), 3u);
    EXPECT_EQ(a["nested"][1][0], 3);
    EXPECT_TRUE(a["empty"].is_array());
}

TEST(Toml, ErrorsCarryLineNumbers) {
    const auto check = [](std::string_view text, const std::string& line) {
        try {
            parse_toml(text);
            ADD_FAILURE() << text;
        } catch (const config_error& e) {
            EXPECT_NE(std::string(e.what()).find("line " + line), std::string::npos) << e.what();
        }
    };
    check("a = 1\na = 2\n", "2");
    check("[t]\nx = \n", "2");
    check("\n\nx = \"unterminated\n", "3");
    check("a.b = 1\n", "1");
    check("x = {y = 1}\n", "1");
    check("[[arr]]\n", "1");
    check("x = 1 junk\n", "1");
    check("[t]\n[t]\n", "2");
}

TEST(Config, DefaultsWhenEmpty) {
    const auto c = parse_config("");
    EXPECT_EQ(to_json(c), to_json(ExperimentConfig{}));
    EXPECT_EQ(c.train.iterations, 10000u);
    EXPECT_EQ(c.train.batch_size, 64u);
    EXPECT_EQ(c.train.lambda_t, std::vector<double>{0.5});
    EXPECT_EQ(c.train.lambda_c, std::vector<double>{0.01});
    EXPECT_EQ(c.bound.t, 2.0);
    EXPECT_EQ(c.bound.delta, 0.05);
    EXPECT_FALSE(c.bound.prior_variance.has_value());
}

TEST(Config, ShippedDefaultFileMatchesBuiltInDefaults) {
    const auto c = load_config(std::string(EMCOMM_SOURCE_DIR) + "/configs/default.toml");
    EXPECT_EQ(to_json(c).dump(), to_json(ExperimentConfig{}).dump());
}

TEST(Config, OverridesAndRoundtrip) {
    const auto c = parse_config(R"(
[model]
message_dim = 2
encoder_hidden = [16]
message_bits = 8
[train]
lambda_t = [0.4, 0.6]
lambda_c = 0.1
optimizer = "sgd"
baseline = "ec-sota"
iterations = 500
[bound]
loss_range = [0.0, 2.0]
prior_variance = 0.2
sigma_mode = "sample"
[env]
noise_scale = 0.0
)");
    EXPECT_EQ(c.train.model.message_dim, 2u);
    EXPECT_EQ(c.train.model.encoder_hidden, std::vector<std::size_t>{16});
    EXPECT_EQ(c.train.lambda_t, (std::vector<double>{0.4, 0.6}));
    EXPECT_EQ(c.train.optimizer.kind, OptimizerKind::sgd);
    EXPECT_EQ(c.train.baseline, BaselineMode::ec_sota);
    EXPECT_EQ(c.bound.loss_range->second, 2.0);
    EXPECT_EQ(*c.bound.prior_variance, 0.2);
    EXPECT_EQ(c.bound.sigma_mode, SigmaMode::sample);
    EXPECT_EQ(c.env.noise_scale, 0.0);

    const auto back = config_from_json(to_json(c));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Config, UnknownKeysAndBadValuesAreErrors) {
    EXPECT_NE(expect_config_error("[train]\nlearning_rat = 0.1\n").find("learning_rat"), std::string::npos);
    EXPECT_NE(expect_config_error("[extra]\nx = 1\n").find("extra"), std::string::npos);
    EXPECT_NE(expect_config_error("[train]\nbatch_size = \"64\"\n").find("train.batch_size"), std::string::npos);
    expect_config_error("[train]\nbatch_size = 0\n");
    expect_config_error("[train]\nbatch_size = -3\n");
    expect_config_error("[model]\nmessage_bits = 3\n");
    expect_config_error("[bound]\nt = 1.0\n");
    expect_config_error("[bound]\ndelta = 1.5\n");
    expect_config_error("[bound]\nloss_range = [1.0]\n");
    expect_config_error("[bound]\nsigma_mode = \"other\"\n");
    expect_config_error("[train]\noptimizer = \"rmsprop\"\n");
    expect_config_error("[env]\ntraffic_ar = 1.0\n");
    expect_config_error("[env]\nchannel_transition = [[0.5, 0.4, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1], "
                        "[0.1, 0.1, 0.7, 0.1], [0.1, 0.1, 0.1, 0.7]]\n");
    expect_config_error("train = 3\n");
}

TEST(Config, MissingFileIsConfigError) {
    EXPECT_THROW(load_config("/nonexistent/config.toml"), config_error);
}

TEST(Manifest, GitBlobHashMatchesGit) {
    // `printf 'hello\n' | git hash-object --stdin`
    EXPECT_EQ(git_blob_hash(bytes_of("hello\n")), "ce013625030ba8dba906f756967f9e9ca394464a");
    // the empty blob
    EXPECT_EQ(git_blob_hash(bytes_of("")), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Manifest, AtomicWriteAndJsonRead) {
    const auto dir = std::filesystem::temp_directory_path() / "emcomm_test_config";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const auto path = (dir / "m.json").string();
    RunManifest m;
    m.command = "train";
    m.seed = 7;
    m.config = Json{{"a", 1}};
    m.input_hashes["data"] = "abc";
    m.outputs["metrics"] = "metrics.csv";
    m.write(path);
    EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
    const auto j = read_json_file(path);
    EXPECT_EQ(j["command"], "train");
    EXPECT_EQ(j["seed"], 7);
    EXPECT_EQ(j["tool_version"], tool_version);

    std::ofstream(dir / "bad.json") << "{not json";
    EXPECT_THROW(read_json_file((dir / "bad.json").string()), format_error);
    EXPECT_THROW(read_json_file((dir / "missing.json").string()), io_error);
    std::filesystem::remove_all(dir);
}
