#include "bdf/cli.hpp"
#include "bdf/errors.hpp"
#include "bdf/io.hpp"
#include "bdf/rng.hpp"
#include "bdf/simgen.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

using namespace bdf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir()
    {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("bdf_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "bdf");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t data_rows(const std::string& path)
{
    const std::string s = slurp(path);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')) - 1;
}

} // namespace

TEST_CASE("simulate writes the requested sizes and is repeatable")
{
    TempDir a, b;
    const Run r = cli({"simulate", "--n1", "150", "--n2", "15", "--seed", "7", "--out-dir", a.path.string()});
    REQUIRE(r.code == 0);
    CHECK(data_rows(a / "main.csv") == 150);
    CHECK(data_rows(a / "external.csv") == 15);
    CHECK(slurp(a / "main.csv").rfind("z1,z2,a,m,y\n", 0) == 0);
    CHECK(slurp(a / "external.csv").rfind("z1,z2,a,m,y,u\n", 0) == 0);
    CHECK(fs::exists(a / "simulate_config.toml"));

    REQUIRE(cli({"simulate", "--n1", "150", "--n2", "15", "--seed", "7", "--out-dir", b.path.string()}).code == 0);
    CHECK(slurp(a / "main.csv") == slurp(b / "main.csv"));
    CHECK(slurp(a / "external.csv") == slurp(b / "external.csv"));
}

TEST_CASE("simulated files round-trip to the in-memory datasets")
{
    TempDir d;
    REQUIRE(cli({"simulate", "--n1", "300", "--seed", "11", "--interaction", "true", "--out-dir", d.path.string()})
                .code == 0);
    const auto coef = GenerativeCoefficients::with_confounding(1.5);
    const DeltaFlags flags{true, true};
    CHECK(read_dataset_csv(fs::path(d / "main.csv")) == generate_dataset(300, coef, flags, derive_key({11, 2}), false));
    CHECK(read_dataset_csv(fs::path(d / "external.csv")) ==
          generate_dataset(30, coef, flags, derive_key({11, 1}), true));

    std::stringstream ss;
    const Dataset mem = generate_dataset(50, coef, flags, 3, true);
    write_dataset_csv(mem, ss);
    CHECK(read_dataset_csv(ss) == mem);
}

TEST_CASE("non-transportable external data drop the U effects")
{
    TempDir d;
    REQUIRE(cli({"simulate", "--n1", "200", "--n2", "80", "--seed", "3", "--transportable", "false", "--out-dir",
                 d.path.string()})
                .code == 0);
    const auto ext = read_dataset_csv(fs::path(d / "external.csv"));
    CHECK(ext == generate_dataset(80, GenerativeCoefficients::with_confounding(0.0), {true, false},
                                  derive_key({3, 1}), true));
    CHECK(read_dataset_csv(fs::path(d / "main.csv")) ==
          generate_dataset(200, GenerativeCoefficients::with_confounding(1.5), {true, false}, derive_key({3, 2}),
                           false));
}

TEST_CASE("malformed CSV input is rejected")
{
    std::stringstream bad_value("z1,a,m,y\n0,1,2,1\n");
    CHECK_THROWS_AS(read_dataset_csv(bad_value), Error);
    std::stringstream gap("z1,z3,a,m,y\n0,1,1,0,1\n");
    CHECK_THROWS_AS(read_dataset_csv(gap), Error);
    std::stringstream ragged("z1,a,m,y\n0,1,1\n");
    CHECK_THROWS_AS(read_dataset_csv(ragged), Error);
    CHECK_THROWS_AS(read_dataset_csv(fs::path("/nonexistent/file.csv")), IoError);
}

TEST_CASE("fit-prior, estimate and correct pipeline")
{
    TempDir d;
    REQUIRE(cli({"simulate", "--n1", "400", "--n2", "400", "--seed", "5", "--out-dir", d.path.string()}).code == 0);
    const Run fp = cli({"fit-prior", "--external", d / "external.csv", "--out", d / "prior.json"});
    REQUIRE(fp.code == 0);
    CHECK(fp.out.find("m.u") != std::string::npos);
    const auto prior = nlohmann::json::parse(slurp(d / "prior.json"));
    CHECK(prior.at("blocks").contains("Y"));

    const std::vector<std::string> base{"estimate", "--main",   d / "main.csv", "--prior", d / "prior.json",
                                        "--iters",  "400",      "--warmup",     "200",     "--seed",
                                        "9",        "--out-dir", d.path.string()};
    const Run est = cli(base);
    REQUIRE(est.code == 0);
    const auto result = nlohmann::json::parse(slurp(d / "result.json"));
    CHECK(result.at("estimand") == "rNDE");
    CHECK(result.at("method") == "BDF-CF");
    CHECK(result.at("ci_low").get<double>() <= result.at("point").get<double>());
    CHECK(result.at("max_rhat").get<double>() < 1.1);
    CHECK(data_rows(d / "draws.csv") == 600);
    const std::string first = slurp(d / "result.json");
    REQUIRE(cli(base).code == 0);
    CHECK(slurp(d / "result.json") == first);

    auto nde = base;
    nde.insert(nde.end(), {"--estimand", "NDE"});
    CHECK(cli(nde).code == exit_code::identification);

    for (const char* m : {"naive", "dg", "ix"}) {
        const Run c = cli({"correct", "--main", d / "main.csv", "--external", d / "external.csv", "--method", m,
                           "--n-boot", "20", "--out-dir", d.path.string()});
        CHECK(c.code == 0);
        const auto j = nlohmann::json::parse(slurp(d / "result.json"));
        CHECK(j.at("n_boot") == 20);
    }
}

TEST_CASE("non-converged runs set the exit code")
{
    TempDir d;
    REQUIRE(cli({"simulate", "--n1", "200", "--n2", "300", "--seed", "2", "--out-dir", d.path.string()}).code == 0);
    REQUIRE(cli({"fit-prior", "--external", d / "external.csv", "--out", d / "prior.json", "--inflate-sigma",
                 "1000"})
                .code == 0);
    const std::vector<std::string> base{"estimate", "--main", d / "main.csv", "--prior", d / "prior.json",
                                        "--iters", "4", "--warmup", "2", "--leapfrog-steps", "1",
                                        "--out-dir", d.path.string()};
    const Run strict = cli(base);
    const auto result = nlohmann::json::parse(slurp(d / "result.json"));
    if (result.at("converged").get<bool>()) {
        CHECK(strict.code == exit_code::ok);
    } else {
        CHECK(strict.code == exit_code::not_converged);
        auto allowed = base;
        allowed.push_back("--allow-nonconverged");
        allowed.push_back("true");
        CHECK(cli(allowed).code == exit_code::convergence_suppressed);
    }
}

TEST_CASE("error exit codes")
{
    TempDir d;
    CHECK(cli({"estimate", "--main", d / "missing.csv", "--prior", d / "missing.json", "--out-dir",
               d.path.string()})
              .code == exit_code::io);
    CHECK(cli({"simulate", "--bogus", "1"}).code >= 100);
    CHECK(cli({}).code >= 100);
    CHECK(cli({"simulate", "--transportable", "maybe"}).code >= 100);
    CHECK(cli({"simulate", "--config", d / "nope.toml"}).code == exit_code::io);
    CHECK(cli({"study", "--replicates", "0"}).code >= 100);

    // The installed executable reports the same codes.
    if (const char* exe = std::getenv("BDF_EXE")) {
        const std::string cmd = std::string(exe) + " simulate --n1 20 --seed 1 --out-dir " + d.path.string() +
                                " > /dev/null";
        CHECK(std::system(cmd.c_str()) == 0);
        const std::string bad = std::string(exe) + " correct --main " + (d / "none.csv") + " --out-dir " +
                                d.path.string() + " 2> /dev/null";
        const int status = std::system(bad.c_str());
        CHECK(WEXITSTATUS(status) == exit_code::io);
    }
}

TEST_CASE("config files supply defaults and flags override them")
{
    TempDir d;
    {
        std::ofstream cfg(d / "sim.toml");
        cfg << "n1 = 120\nn2 = 12\nseed = 4\ninteraction = true\nout-dir = \"" << d.path.string() << "\"\n";
    }
    REQUIRE(cli({"simulate", "--config", d / "sim.toml"}).code == 0);
    CHECK(data_rows(d / "main.csv") == 120);
    CHECK(data_rows(d / "external.csv") == 12);
    const std::string resolved = slurp(d / "simulate_config.toml");
    CHECK(resolved.find("n1=120") != std::string::npos);
    CHECK(resolved.find("interaction=true") != std::string::npos);

    REQUIRE(cli({"simulate", "--config", d / "sim.toml", "--n1", "50"}).code == 0);
    CHECK(data_rows(d / "main.csv") == 50);
    CHECK(slurp(d / "simulate_config.toml").find("n1=50") != std::string::npos);
}

TEST_CASE("study command is deterministic")
{
    TempDir a, b;
    auto run = [](const TempDir& dir) {
        return cli({"study", "--n1", "1500", "--replicates", "2", "--iters", "300", "--warmup", "150", "--n-boot",
                    "10", "--seed", "3", "--transportable", "true", "false", "--out-dir", dir.path.string()});
    };
    REQUIRE(run(a).code == 0);
    REQUIRE(run(b).code == 0);
    CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));
    CHECK(slurp(a / "replicates.csv") == slurp(b / "replicates.csv"));
    CHECK(data_rows(a / "report.csv") == 2 * kStudyMethods.size());
    const auto j = nlohmann::json::parse(slurp(a / "report.json"));
    CHECK(j.at("scenarios").size() == 2);
    CHECK(fs::exists(a / "study_config.toml"));
}
