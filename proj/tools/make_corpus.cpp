// Writes a deterministic plain-text corpus for pipeline runs and tests.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "elm/data.hpp"

int main(int argc, char** argv) {
    CLI::App app{"generate a deterministic plain-text corpus"};
    std::string out;
    uint64_t bytes = 600000;
    uint64_t seed = 0;
    app.add_option("--out", out, "output file")->required();
    app.add_option("--bytes", bytes, "minimum size in bytes");
    app.add_option("--seed", seed, "generator seed");
    CLI11_PARSE(app, argc, argv);

    const std::string text = elm::synthetic_corpus(bytes, seed);
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) {
        std::cerr << "cannot write " << out << "\n";
        return 1;
    }
    f << text;
    f.close();
    if (!f) {
        std::cerr << "write failed for " << out << "\n";
        return 1;
    }
    std::cout << "wrote " << text.size() << " bytes to " << out << "\n";
    return 0;
}
