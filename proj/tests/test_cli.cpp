#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "varcomp/cli.hpp"

using namespace varcomp;
namespace fs = std::filesystem;

namespace {

const std::string kData = VARCOMP_DATA_DIR;

struct RunOutcome {
  int code;
  std::string out;
  std::string err;
};

RunOutcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "varcomp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("varcomp_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(file(name)) << text;
    return file(name);
  }

 private:
  fs::path path_;
};

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  return nlohmann::json::parse(in);
}

double component(const nlohmann::json& report, const std::string& key, const std::string& name) {
  const auto names = report["model"]["components"].get<std::vector<std::string>>();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return report[key]["tau_hat"][i].get<double>();
  ADD_FAILURE() << "no component " << name;
  return 0.0;
}

}  // namespace

TEST(CliCsv, Rfc4180Parsing) {
  std::istringstream in("\xEF\xBB\xBFname,\"note, with comma\",v\r\n\"a \"\"q\"\"\",\"x\ny\",1.5\r\nb,,2\n");
  const cli::InputTable t = cli::parse_csv(in);
  ASSERT_EQ(t.header.size(), 3u);
  EXPECT_EQ(t.header[0], "name");
  EXPECT_EQ(t.header[1], "note, with comma");
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][0], "a \"q\"");
  EXPECT_EQ(t.rows[0][1], "x\ny");
  EXPECT_EQ(t.rows[1][1], "");
  EXPECT_THROW(t.values("note, with comma"), Error);  // missing value
  EXPECT_EQ(t.column("NAME"), 0u);
  std::istringstream ragged("a,b\n1\n");
  EXPECT_THROW(cli::parse_csv(ragged), Error);
  std::istringstream open_quote("a\n\"x\n");
  EXPECT_THROW(cli::parse_csv(open_quote), Error);
}

TEST(CliCsv, NumbersAreLocaleIndependent) {
  EXPECT_EQ(cli::parse_number("1.5"), 1.5);
  EXPECT_EQ(cli::parse_number(" -2e3 "), -2000.0);
  EXPECT_EQ(cli::parse_number("+4"), 4.0);
  EXPECT_FALSE(cli::parse_number("1,5").has_value());
  EXPECT_FALSE(cli::parse_number("abc").has_value());
  EXPECT_FALSE(cli::parse_number("").has_value());
  EXPECT_FALSE(cli::parse_number("inf").has_value());
}

TEST(CliCsv, FactorCodesFollowFirstAppearance) {
  const cli::FactorCodes f = cli::encode_factor({"z", "a", "z", "m", "a"});
  EXPECT_EQ(f.levels, (std::vector<std::string>{"z", "a", "m"}));
  EXPECT_EQ(f.codes, (std::vector<Index>{0, 1, 0, 2, 1}));
}

TEST(CliModel, TermParsing) {
  const auto nested = cli::nested_terms("a/b/c");
  ASSERT_EQ(nested.size(), 3u);
  EXPECT_EQ(nested[2].name(), "a:b:c");
  EXPECT_EQ(cli::crossed_terms("a, b")[1].name(), "b");
  const auto fixed = cli::fixed_terms("factor(nitro),Variety");
  ASSERT_EQ(fixed.size(), 2u);
  EXPECT_TRUE(fixed[0].as_factor);
  EXPECT_EQ(fixed[0].column, "nitro");
  EXPECT_FALSE(fixed[1].as_factor);
  EXPECT_THROW(cli::nested_terms("a//b"), Error);
}

TEST(CliModel, ContrastParsing) {
  const auto c = cli::parse_contrast("1,-1", "greater", 2);
  EXPECT_FALSE(c.spec.two_sided());
  EXPECT_EQ(c.spec.a, (Matrix{{1.0, -1.0}}));
  EXPECT_TRUE(cli::parse_contrast("1, -1, 0; 0, 1, -1", "two-sided", 3).spec.two_sided());
  EXPECT_THROW(cli::parse_contrast("1,-1;2,-2", "two-sided", 2), Error);
  EXPECT_THROW(cli::parse_contrast("1,-1,0", "two-sided", 2), Error);
  EXPECT_THROW(cli::parse_contrast("1,-1", "sideways", 2), Error);
  EXPECT_THROW(cli::parse_contrast("1,-1;1,0", "greater", 2), Error);
}

TEST(CliFit, PastesNested) {
  TempDir tmp;
  const auto r = run({"fit", kData + "/pastes.csv", "--response", "strength", "--nested", "batch/cask", "--out",
                      tmp.file("fit.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(tmp.file("fit.json"));
  EXPECT_EQ(j["schema"], 1);
  EXPECT_EQ(j["model"]["n"], 60);
  EXPECT_EQ(j["model"]["levels"], nlohmann::json::array({10, 30}));
  EXPECT_NEAR(component(j, "fit", "batch:cask"), 12.49, 0.01 * 12.49);
  EXPECT_NEAR(component(j, "fit", "batch"), 2.44, 0.01 * 2.44);
  EXPECT_NE(r.out.find("Hessian eigenvalues"), std::string::npos);
}

TEST(CliFit, OatsSplitPlot) {
  const auto r = run({"fit", kData + "/oats.csv", "--response", "yield", "--nested", "block/variety", "--fixed",
                      "factor(nitro),Variety"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["model"]["p"], 6);
  EXPECT_NEAR(component(j, "fit", "block"), 1.32, 0.01 * 1.32);
  EXPECT_NEAR(component(j, "fit", "block:variety"), 0.675, 0.01 * 0.675);
}

TEST(CliFit, PenicillinCrossed) {
  const auto r = run({"fit", kData + "/penicillin.csv", "--response", "diameter", "--crossed", "sample,plate"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(component(j, "fit", "sample"), 12.34, 0.01 * 12.34);
  EXPECT_NEAR(component(j, "fit", "plate"), 2.37, 0.01 * 2.37);
}

TEST(CliFit, RepeatedRandomFlagsMatchNested) {
  const auto a = run({"fit", kData + "/pastes.csv", "--response", "strength", "--random", "batch", "--random",
                      "batch:cask"});
  const auto b = run({"fit", kData + "/pastes.csv", "--response", "strength", "--nested", "batch/cask"});
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(nlohmann::json::parse(a.out)["fit"]["tau_hat"], nlohmann::json::parse(b.out)["fit"]["tau_hat"]);
}

TEST(CliExitCodes, InputErrors) {
  TempDir tmp;
  const std::string constant = tmp.write("const.csv", "y,g\n3,a\n3,a\n3,b\n3,b\n3,c\n3,c\n");
  auto r = run({"fit", constant, "--response", "y", "--random", "g"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("degenerate response"), std::string::npos);

  r = run({"fit", kData + "/pastes.csv", "--response", "nope", "--random", "batch"});
  EXPECT_EQ(r.code, 2);
  r = run({"fit", tmp.file("missing.csv"), "--response", "y", "--random", "g"});
  EXPECT_EQ(r.code, 2);
  r = run({"fit", kData + "/pastes.csv", "--response", "strength"});
  EXPECT_EQ(r.code, 2);
  r = run({"fit", kData + "/pastes.csv", "--response", "batch", "--random", "cask"});
  EXPECT_EQ(r.code, 2);
  r = run({"bogus"});
  EXPECT_EQ(r.code, 2);
}

TEST(CliExitCodes, RankDeficientContrastAndMissingSeed) {
  TempDir tmp;
  auto r = run({"test", kData + "/pastes.csv", "--response", "strength", "--nested", "batch/cask", "--contrast",
                "1,-1;2,-2", "--alt", "two-sided,two-sided", "--bootstrap", "10", "--seed", "1", "--out",
                tmp.file("r.json")});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(tmp.file("r.json")));
  r = run({"test", kData + "/pastes.csv", "--response", "strength", "--nested", "batch/cask", "--contrast", "1,-1"});
  EXPECT_EQ(r.code, 2);
}

TEST(CliExitCodes, SingularAndConfoundedDesigns) {
  TempDir tmp;
  const std::string data = tmp.write("d.csv", "y,g,c\n1.0,a,2\n2.5,a,2\n0.3,b,2\n1.9,b,2\n4.0,c,2\n2.2,c,2\n");
  auto r = run({"fit", data, "--response", "y", "--random", "g", "--fixed", "c"});
  EXPECT_EQ(r.code, 4);
  r = run({"fit", data, "--response", "y", "--random", "g", "--random", "g"});
  EXPECT_EQ(r.code, 4);
}

TEST(CliExitCodes, KindMapping) {
  EXPECT_EQ(cli::exit_code_for(ErrorKind::InvalidInput), 2);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::DegenerateResponse), 2);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::NonConvergence), 3);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::SingularDesign), 4);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::ConfoundedDesign), 4);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::BootstrapFailure), 5);
}

TEST(CliTest, PastesOneSidedAgainstCaskExceedingBatch) {
  // Components are (batch, batch:cask); "less" on batch - cask is the
  // alternative that cask-within-batch variability is larger.
  TempDir tmp;
  const auto r = run({"test", kData + "/pastes.csv", "--response", "strength", "--nested", "batch/cask",
                      "--contrast", "1,-1", "--alt", "less", "--bootstrap", "1000", "--seed", "1", "--out",
                      tmp.file("r.json"), "--dump-draws", tmp.file("draws.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(tmp.file("r.json"));
  const double p_one = j["test"]["p_one"].get<double>();
  EXPECT_NEAR(p_one, 0.13, 3 * 0.021);
  EXPECT_LE(p_one, j["test"]["p_two"].get<double>());
  EXPECT_EQ(j["test"]["b"], 1000);
  EXPECT_EQ(j["test"]["statistic"], "lr");

  std::ifstream draws(tmp.file("draws.csv"));
  std::string header;
  std::getline(draws, header);
  EXPECT_EQ(header, "b,tau_star_1,tau_star_2,lambda_star");
  int rows = 0;
  for (std::string line; std::getline(draws, line);) ++rows;
  EXPECT_EQ(rows, j["test"]["b_effective"].get<int>());
}

TEST(CliTest, PenicillinRejectsEquality) {
  const auto r = run({"test", kData + "/penicillin.csv", "--response", "diameter", "--crossed", "sample,plate",
                      "--contrast", "1,-1", "--alt", "two-sided", "--bootstrap", "1000", "--seed", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["test"]["p_one"].is_null());
  EXPECT_LT(j["test"]["p_two"].get<double>(), 0.01);
}

TEST(CliTest, WorkersDoNotChangeTheReport) {
  std::vector<std::string> base{"test", kData + "/pastes.csv", "--response", "strength", "--nested", "batch/cask",
                                "--contrast", "1,-1", "--bootstrap", "50", "--seed", "4"};
  auto one = base, four = base;
  one.insert(one.end(), {"--workers", "1"});
  four.insert(four.end(), {"--workers", "4"});
  auto a = nlohmann::json::parse(run(one).out);
  auto b = nlohmann::json::parse(run(four).out);
  EXPECT_EQ(a["test"]["p_two"], b["test"]["p_two"]);
  EXPECT_EQ(a["null_fit"], b["null_fit"]);
}

TEST(CliReport, JsonRoundTrip) {
  TempDir tmp;
  ASSERT_EQ(run({"test", kData + "/pastes.csv", "--response", "strength", "--nested", "batch/cask", "--contrast",
                 "1,-1", "--alt", "greater", "--bootstrap", "30", "--seed", "2", "--plus-one", "--out",
                 tmp.file("r.json")})
                .code,
            0);
  const auto j = read_json(tmp.file("r.json"));
  const cli::RunReport rep = j.get<cli::RunReport>();
  EXPECT_EQ(nlohmann::json(rep), j);
  EXPECT_TRUE(rep.test->plus_one);
  EXPECT_EQ(rep.components, (std::vector<std::string>{"batch", "batch:cask"}));
  auto bad = j;
  bad["schema"] = 2;
  EXPECT_THROW(bad.get<cli::RunReport>(), Error);
}

TEST(CliSimulate, ToyManifestAndDeterminism) {
  TempDir tmp;
  const std::string manifest = tmp.write("m.json", R"({"family": "nested", "sizes": [{"m": 5, "n": 3, "r": 2}],
    "tau_grid": [[1, 1]], "s": 5, "b": 19})");
  auto r = run({"simulate", "--config", manifest, "--out", tmp.file("a.csv"), "--seed", "8"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"simulate", "--config", manifest, "--out", tmp.file("b.csv"), "--seed", "8", "--workers", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto slurp = [](const std::string& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string a = slurp(tmp.file("a.csv"));
  EXPECT_EQ(a, slurp(tmp.file("b.csv")));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 2);
  const auto echoed = read_json(tmp.file("a.csv.manifest.json"));
  EXPECT_EQ(echoed["seed"], 8);
  EXPECT_EQ(echoed["balanced"], true);
  EXPECT_EQ(echoed["statistic"], "lr");
}

TEST(CliSimulate, MalformedManifest) {
  TempDir tmp;
  const std::string manifest = tmp.write("bad.json", "{\"sizes\": [");
  EXPECT_EQ(run({"simulate", "--config", manifest, "--out", tmp.file("o.csv")}).code, 2);
  EXPECT_FALSE(fs::exists(tmp.file("o.csv")));
}
