#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ccam/ccam.hpp"

using namespace ccam;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
}

/// Removes the wall-clock column (fourth field) from every train_log.csv row.
std::string drop_seconds(const std::string& csv) {
  std::istringstream is(csv);
  std::string line, out;
  while (std::getline(is, line)) {
    std::size_t a = 0;
    for (int k = 0; k < 3; ++k) a = line.find(',', a) + 1;
    const std::size_t b = line.find(',', a);
    out += line.substr(0, a) + line.substr(b + 1) + '\n';
  }
  return out;
}

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "ccam_cli_test_output.txt";
  const std::string cmd = std::string(CCAM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(log)};
}

const char* kTiny =
    "seed = 3\n"
    "image_size = 32\n"
    "train_size = 24\n"
    "test_size = 8\n"
    "epochs = 1\n"
    "batch_size = 6\n";

/// Shared scratch area with a tiny config, its dataset and one trained checkpoint.
class CliFixture : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "ccam_cli_tests";
    fs::remove_all(root);
    fs::create_directories(root);
    spit(root / "tiny.cfg", kTiny);
    ASSERT_EQ(cli("gen-data -c " + path("tiny.cfg") + " -o " + path("data")).code, 0);
    ASSERT_EQ(cli("train -c " + path("tiny.cfg") + " -d " + path("data") + " -o " + path("m/model.ckpt")).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static std::string path(const std::string& rel) { return (root / rel).string(); }
};

fs::path CliFixture::root;

}  // namespace

TEST(Config, DefaultsRoundTripThroughCanonicalText) {
  const Config c;
  const std::string text = serialize_config(c);
  EXPECT_EQ(parse_config(text), c);
  EXPECT_EQ(serialize_config(parse_config(text)), text);
}

TEST(Config, NonDefaultValuesRoundTrip) {
  Config c;
  c.seed = 123456789012345ull;
  c.image_size = 48;
  c.num_fg_classes = 5;
  c.num_bg_classes = 3;
  c.cooc_bias = 0.7;
  c.lr = 3.3e-4;
  c.alpha = 0.1 + 0.2;  // not exactly representable as a short decimal
  c.use_counterfactual = false;
  c.beta = 0.35;
  c.temperature = 2.5;
  c.seg_threshold = 0.2;
  c.omega_scheme = CombinationScheme::Linear;
  c.cam_source = CamSource::Backbone;
  const Config back = parse_config(serialize_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.alpha, c.alpha);
}

TEST(Config, CanonicalTextListsEveryKeyOnce) {
  const std::string text = serialize_config(Config{});
  for (const char* key : {"seed", "image_size", "num_fg_classes", "num_bg_classes", "cooc_bias", "train_size",
                          "test_size", "epochs", "batch_size", "lr", "alpha", "use_counterfactual", "use_decouple",
                          "beta", "delta", "temperature", "adapt_lr", "adapt_passes", "seg_threshold",
                          "omega_scheme", "cam_source"}) {
    const std::string needle = std::string(key) + " = ";
    const auto at = text.find(needle);
    ASSERT_NE(at, std::string::npos) << key;
    EXPECT_TRUE(at == 0 || text[at - 1] == '\n') << key;
  }
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 21);
}

TEST(Config, CommentsBlanksAndDefaults) {
  const Config c = parse_config("# header\n\n  epochs = 5   # inline\nbeta=0.5\n");
  EXPECT_EQ(c.epochs, 5);
  EXPECT_EQ(c.beta, 0.5);
  EXPECT_EQ(c.batch_size, Config{}.batch_size);
  EXPECT_EQ(c.temperature, 15.0);
}

TEST(Config, ErrorsNameTheOffendingKey) {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("learning_rate = 0.1\n").find("learning_rate"), std::string::npos);
  EXPECT_NE(message("epochs = 2\nepochs = 3\n").find("duplicate key epochs"), std::string::npos);
  EXPECT_NE(message("lr =\n").find("lr"), std::string::npos);
  EXPECT_NE(message("epochs = 2.5\n").find("epochs"), std::string::npos);
  EXPECT_NE(message("use_decouple = yes\n").find("use_decouple"), std::string::npos);
  EXPECT_NE(message("omega_scheme = top5\n").find("omega_scheme"), std::string::npos);
  EXPECT_NE(message("just words\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("beta = 1.5\n").find("beta"), std::string::npos);
  EXPECT_NE(message("num_bg_classes = 1\n").find("num_bg_classes"), std::string::npos);
  EXPECT_NE(message("cooc_bias = 0.1\n").find("cooc_bias"), std::string::npos);
  EXPECT_NE(message("image_size = 60\n").find("image_size"), std::string::npos);
  EXPECT_NE(message("temperature = 0\n").find("temperature"), std::string::npos);
  EXPECT_NE(message("seg_threshold = 1\n").find("seg_threshold"), std::string::npos);
}

TEST(Config, SubConfigsCarryTheSharedValues) {
  Config c = parse_config("seed = 11\nbatch_size = 8\nadapt_lr = 0.002\nalpha = 0.5\nseg_threshold = 0.3\n");
  EXPECT_EQ(c.train().seed, 11u);
  EXPECT_EQ(c.train().batch_size, 8);
  EXPECT_EQ(c.train().alpha, 0.5);
  EXPECT_EQ(c.adapt().lr, 0.002);
  EXPECT_EQ(c.adapt().batch_size, 8);
  EXPECT_EQ(c.adapt().beta, 0.2);
  EXPECT_EQ(c.adapt().delta, 0.012);
  EXPECT_EQ(c.eval().seg_threshold, 0.3);
  EXPECT_EQ(c.dataset().seed, 11u);
}

TEST(Config, LoadConfigMissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/ccam.cfg"), ConfigError);
}

TEST_F(CliFixture, GenDataWritesAllScenes) {
  const auto ds = load_dataset(path("data"));
  EXPECT_EQ(ds.size(), 32u);
  EXPECT_EQ(filter_split(ds, Split::Test).size(), 8u);
}

TEST_F(CliFixture, ConfigErrorsExitTwo) {
  spit(root / "bad.cfg", std::string(kTiny) + "warmup = 3\n");
  const auto r = cli("gen-data -c " + path("bad.cfg") + " -o " + path("bad_data"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("warmup"), std::string::npos);
  EXPECT_EQ(cli("gen-data -c " + path("missing.cfg") + " -o " + path("x")).code, 2);
  EXPECT_EQ(cli("gen-data -c " + path("tiny.cfg")).code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("").code, 2);
}

TEST_F(CliFixture, HelpExitsZero) { EXPECT_EQ(cli("--help").code, 0); }

TEST_F(CliFixture, IoErrorsExitThree) {
  spit(root / "plain_file", "x");
  EXPECT_EQ(cli("gen-data -c " + path("tiny.cfg") + " -o " + path("plain_file/sub")).code, 3);
  EXPECT_EQ(cli("train -c " + path("tiny.cfg") + " -d " + path("no_such_dir") + " -o " + path("t/m.ckpt")).code, 3);
  EXPECT_EQ(cli("eval -c " + path("tiny.cfg") + " -d " + path("no_such_dir") + " -m " + path("m/model.ckpt") +
                " -o " + path("e"))
                .code,
            3);
}

TEST_F(CliFixture, CorruptCheckpointExitsFive) {
  std::string bytes = slurp(root / "m/model.ckpt");
  ASSERT_GT(bytes.size(), 8u);
  bytes[0] = static_cast<char>(bytes[0] ^ 0x5a);
  spit(root / "corrupt.ckpt", bytes);
  EXPECT_EQ(cli("adapt -c " + path("tiny.cfg") + " -d " + path("data") + " -i " + path("corrupt.ckpt") + " -o " +
                path("a/out.ckpt"))
                .code,
            5);
  EXPECT_EQ(cli("eval -c " + path("tiny.cfg") + " -d " + path("data") + " -m " + path("corrupt.ckpt") + " -o " +
                path("e_corrupt"))
                .code,
            5);
  spit(root / "truncated.ckpt", slurp(root / "m/model.ckpt").substr(0, 40));
  EXPECT_EQ(cli("eval -c " + path("tiny.cfg") + " -d " + path("data") + " -m " + path("truncated.ckpt") + " -o " +
                path("e_trunc"))
                .code,
            5);
}

TEST_F(CliFixture, ClassCountMismatchExitsSix) {
  spit(root / "five.cfg", std::string(kTiny) + "num_fg_classes = 5\n");
  EXPECT_EQ(cli("eval -c " + path("five.cfg") + " -d " + path("data") + " -m " + path("m/model.ckpt") + " -o " +
                path("e_mismatch"))
                .code,
            6);
  EXPECT_EQ(cli("adapt -c " + path("five.cfg") + " -d " + path("data") + " -i " + path("m/model.ckpt") + " -o " +
                path("a_mismatch/out.ckpt"))
                .code,
            6);
}

TEST_F(CliFixture, AblationFlagsLeaveTwoCrossEntropyTerms) {
  ASSERT_EQ(cli("train -c " + path("tiny.cfg") + " -d " + path("data") + " -o " + path("abl/model.ckpt") +
                " --no-counterfactual --no-decouple")
                .code,
            0);
  std::istringstream log(slurp(root / "abl/train_log.csv"));
  std::string header, row;
  std::getline(log, header);
  std::getline(log, row);
  EXPECT_EQ(header.substr(header.rfind(',') + 1), "loss_terms");
  EXPECT_EQ(row.substr(row.rfind(',') + 1), "2");
  std::istringstream full(slurp(root / "m/train_log.csv"));
  std::getline(full, header);
  std::getline(full, row);
  EXPECT_EQ(row.substr(row.rfind(',') + 1), "4");
}

TEST_F(CliFixture, EvalWritesSixMetricRowsAndDumps) {
  ASSERT_EQ(cli("eval -c " + path("tiny.cfg") + " -d " + path("data") + " -m " + path("m/model.ckpt") + " -o " +
                path("ev") + " --dump-cams " + path("dump"))
                .code,
            0);
  std::istringstream metrics(slurp(root / "ev/metrics.csv"));
  std::string line;
  std::getline(metrics, line);
  EXPECT_EQ(line, "metric,value");
  int rows = 0;
  while (std::getline(metrics, line)) rows += !line.empty();
  EXPECT_EQ(rows, 6);
  std::istringstream per(slurp(root / "ev/per_image.csv"));
  std::getline(per, line);
  EXPECT_EQ(line, "id,pred,fg_class,iou,x0,y0,x1,y1");
  int images = 0;
  while (std::getline(per, line)) images += !line.empty();
  EXPECT_EQ(images, 8);
  int pgm = 0, ppm = 0;
  for (const auto& e : fs::directory_iterator(root / "dump/cams")) pgm += e.path().extension() == ".pgm";
  for (const auto& e : fs::directory_iterator(root / "dump/overlays")) ppm += e.path().extension() == ".ppm";
  EXPECT_EQ(pgm, 8);
  EXPECT_EQ(ppm, 8);
}

TEST_F(CliFixture, ZeroAdaptLrOnlyChangesRunningStatistics) {
  spit(root / "lr0.cfg", std::string(kTiny) + "adapt_lr = 0\n");
  ASSERT_EQ(cli("adapt -c " + path("lr0.cfg") + " -d " + path("data") + " -i " + path("m/model.ckpt") + " -o " +
                path("lr0/out.ckpt"))
                .code,
            0);
  const auto before = read_checkpoint(path("m/model.ckpt"));
  const auto after = read_checkpoint(path("lr0/out.ckpt"));
  ASSERT_EQ(before.size(), after.size());
  int changed_stats = 0;
  for (std::size_t k = 0; k < before.size(); ++k) {
    const auto& [name, t] = before[k];
    ASSERT_EQ(name, after[k].first);
    const bool same = t.shape() == after[k].second.shape() &&
                      std::equal(t.data().begin(), t.data().end(), after[k].second.data().begin());
    const bool is_stat = name.find("running_") != std::string::npos;
    if (is_stat) {
      changed_stats += !same;
    } else if (name != "meta.adapted") {
      EXPECT_TRUE(same) << name;
    }
  }
  EXPECT_GT(changed_stats, 0);
}

TEST_F(CliFixture, EveryCommandIsByteIdenticalAcrossRuns) {
  for (const char* tag : {"r1", "r2"}) {
    const std::string t = tag;
    ASSERT_EQ(cli("gen-data -c " + path("tiny.cfg") + " -o " + path(t + "/data")).code, 0);
    ASSERT_EQ(cli("train -c " + path("tiny.cfg") + " -d " + path(t + "/data") + " -o " + path(t + "/model.ckpt")).code,
              0);
    ASSERT_EQ(cli("adapt -c " + path("tiny.cfg") + " -d " + path(t + "/data") + " -i " + path(t + "/model.ckpt") +
                  " -o " + path(t + "/adapted.ckpt"))
                  .code,
              0);
    ASSERT_EQ(cli("eval -c " + path("tiny.cfg") + " -d " + path(t + "/data") + " -m " + path(t + "/adapted.ckpt") +
                  " -o " + path(t + "/eval") + " --dump-cams " + path(t + "/dump"))
                  .code,
              0);
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root / "r1")) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root / "r1"));
  }
  ASSERT_GT(files.size(), 60u);
  for (const auto& rel : files) {
    if (rel.filename() == "train_log.csv") {
      EXPECT_EQ(drop_seconds(slurp(root / "r1" / rel)), drop_seconds(slurp(root / "r2" / rel)));
      continue;
    }
    EXPECT_EQ(slurp(root / "r1" / rel), slurp(root / "r2" / rel)) << rel;
  }
  EXPECT_EQ(slurp(root / "r1/data/manifest.tsv"), slurp(root / "r2/data/manifest.tsv"));
}
