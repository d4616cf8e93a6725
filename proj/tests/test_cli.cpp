#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <regex>

#include "pivm/storage.hpp"
#include "support.hpp"

#ifndef PIVM_CLI
#error "PIVM_CLI must name the pivm executable"
#endif

namespace fs = std::filesystem;
using namespace pivm;

namespace {

struct Outcome {
    int code = -1;
    std::string err;
};

const fs::path& root() {
    static const fs::path dir = [] {
        auto d = testing::scratch("cli");
        storage::write_text(d / "tiny.cfg",
                            "phantom.image_size = 16\nphantom.n_organs = 3\npriors.label_organs = 3\nphantom.volumes = 4\n"
                            "phantom.slices_per_volume = 3\nphantom.train_fraction = 0.5\ndiffusion.T = 6\n"
                            "denoiser.epochs = 1\ndenoiser.batch_size = 4\nsample.count = 2\n");
        return d;
    }();
    return dir;
}

Outcome pivm_cli(const std::string& args) {
    const auto log = root() / "stderr.txt";
    const std::string cmd = "cd '" + root().string() + "' && env -u PIVM_RUN__SEED '" + PIVM_CLI + "' " + args +
                            " > /dev/null 2> '" + log.string() + "'";
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.err = storage::read_text(log);
    return o;
}

void prepare() {
    static bool done = false;
    if (done) return;
    REQUIRE(pivm_cli("gen-data --config tiny.cfg --out data").code == 0);
    REQUIRE(pivm_cli("build-priors --config tiny.cfg --data data --out priors").code == 0);
    REQUIRE(pivm_cli("train --config tiny.cfg --data data --priors priors --mode pivm --out ck-pivm").code == 0);
    REQUIRE(pivm_cli("train --config tiny.cfg --data data --priors priors --mode cddpm --out ck-cddpm").code == 0);
    done = true;
}

}  // namespace

TEST_CASE("both modes sample one image per slice with matching shapes") {
    prepare();
    REQUIRE(pivm_cli("sample --config tiny.cfg --data data --checkpoint ck-pivm --out s-pivm").code == 0);
    REQUIRE(pivm_cli("sample --config tiny.cfg --data data --checkpoint ck-cddpm --mode cddpm --out s-cddpm").code == 0);
    for (const char* d : {"s-pivm", "s-cddpm"}) {
        CHECK(fs::exists(root() / d / "sample_001.pgm"));
        CHECK(fs::exists(root() / d / "sample_002.pgm"));
        CHECK(!fs::exists(root() / d / "sample_003.pgm"));
        CHECK(fs::exists(root() / d / "manifest.txt"));
    }
    const auto a = storage::read_tensor(root() / "s-pivm" / "samples.tns");
    const auto b = storage::read_tensor(root() / "s-cddpm" / "samples.tns");
    CHECK(a.dims == b.dims);
    CHECK(a.dims == std::vector<std::uint32_t>{2, 16, 16});
    CHECK(a.f32 != b.f32);
    const auto pgm = storage::read_bytes(root() / "s-pivm" / "sample_001.pgm");
    CHECK(std::string(pgm.begin(), pgm.begin() + 2) == "P5");
}

TEST_CASE("repeat runs are byte-identical") {
    prepare();
    REQUIRE(pivm_cli("sample --config tiny.cfg --data data --checkpoint ck-pivm --out r1").code == 0);
    REQUIRE(pivm_cli("sample --config tiny.cfg --data data --checkpoint ck-pivm --out r2").code == 0);
    for (const char* f : {"samples.tns", "sample_001.pgm", "manifest.txt"})
        CHECK(storage::read_bytes(root() / "r1" / f) == storage::read_bytes(root() / "r2" / f));
}

TEST_CASE("errors map to exit codes and one structured line") {
    const std::regex line(R"(error kind=[a-z_-]+ code=[0-9] message="[^"\n]*"\n?)");
    auto expect = [&](const std::string& args, int code) {
        const auto o = pivm_cli(args);
        INFO(args << " -> " << o.err);
        CHECK(o.code == code);
        CHECK(std::regex_match(o.err, line));
    };
    expect("gen-data --out x --set no.such=1", 2);
    expect("gen-data --out x --threads 0", 2);
    expect("gen-data --out x --set diffusion.T=abc", 2);
    expect("frobnicate --out x", 2);
    expect("sample --out x --data nowhere --checkpoint nowhere", 3);
    expect("train --config tiny.cfg --data data --priors priors --mode latent --out bad-mode", 2);

    prepare();
    fs::copy(root() / "ck-pivm", root() / "ck-broken", fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    for (const auto& e : fs::directory_iterator(root() / "ck-broken"))
        if (e.path().filename().string().starts_with("param.")) {
            fs::resize_file(e.path(), fs::file_size(e.path()) - 1);
            break;
        }
    expect("sample --config tiny.cfg --data data --checkpoint ck-broken --out x", 4);
    CHECK(pivm_cli("--help").code == 0);
}
