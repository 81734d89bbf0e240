#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include <set>

#include "cakes/backbone.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = CAKES_CLI_PATH;
const std::string kConfigs = CAKES_CONFIG_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cakes_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& dir) {
  const std::string cmd = kCli + " " + args + " > \"" + (dir / "out.txt").string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string cfg(const char* name) { return kConfigs + "/" + name; }

}  // namespace

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("codes");
  EXPECT_EQ(run("--help", dir), 0);
  EXPECT_EQ(run("search --backbone " + cfg("backbone_small.json"), dir), 2);  // missing --task
  {
    std::ofstream bad(dir / "bad.json");
    bad << "{\"kind\": \"planted_plane\", \"dims\": [16,16,16], \"unknown\": 1}";
  }
  EXPECT_EQ(run("search --backbone " + cfg("backbone_small.json") + " --task " + (dir / "bad.json").string() +
                    " --out " + (dir / "s").string(),
                dir),
            2);
  EXPECT_EQ(run("gradcheck --cases 2", dir), 0);
  EXPECT_EQ(run("gradcheck --cases 2 --corrupt conv", dir), 4);
}

TEST(Cli, GradcheckListsEveryOpOnce) {
  const fs::path dir = scratch("grad");
  ASSERT_EQ(run("gradcheck --cases 2", dir), 0);
  std::ifstream in(dir / "out.txt");
  std::set<std::string> ops;
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);)
    if (line.find(" cases ") != std::string::npos) {
      ++lines;
      ops.insert(line.substr(0, line.find(' ')));
    }
  EXPECT_EQ(ops.size(), lines);
  EXPECT_TRUE(ops.count("conv3d"));
}

TEST(Cli, ZeroIterationTrainingGivesChanceAccuracy) {
  const fs::path dir = scratch("chance");
  ASSERT_EQ(run("manual --backbone " + cfg("backbone_small.json") + " --scheme full3d --out " +
                    (dir / "m").string(),
                dir),
            0);
  ASSERT_EQ(run("train-final --backbone " + cfg("backbone_small.json") + " --config " +
                    (dir / "m/config.json").string() + " --task " + cfg("task_small.json") + " --train " +
                    cfg("train_final.json") + " --iterations 0 --out " + (dir / "t").string(),
                dir),
            0);
  const auto metrics = cakes::config::read_file((dir / "t/metrics.json").string());
  const double acc = metrics["val"]["accuracy"].get<double>();
  EXPECT_LE(acc, 0.6);  // four balanced classes; an untrained net is near 0.25
  ASSERT_EQ(run("cost-report --backbone " + cfg("backbone_small.json") + " --config " +
                    (dir / "m/config.json").string() + " --out " + (dir / "r").string(),
                dir),
            0);
  ASSERT_EQ(run("plot --report " + (dir / "r/report.json").string() + " --out " + (dir / "p").string(), dir), 0);
  EXPECT_TRUE(fs::exists(dir / "p/composition.svg"));
  // A zero-iteration log has no rows to draw.
  EXPECT_EQ(run("plot --log " + (dir / "t/log.csv").string() + " --out " + (dir / "p").string(), dir), 2);
  EXPECT_FALSE(fs::exists(dir / "p/loss.svg"));
}
