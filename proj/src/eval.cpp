#include "elm/eval.hpp"

#include <cmath>

#include "elm/error.hpp"

namespace elm {

template <class Real>
double perplexity(const WeightsT<Real>& w, const SubNetworkConfig& theta,
                  const std::vector<TokenBatch>& evalset) {
    if (evalset.empty()) throw InputError("perplexity: evaluation set is empty");

    const int64_t vocab = w.cfg.vocab_size;
    double total = 0.0;
    int64_t count = 0;
    for (const auto& batch : evalset) {
        if (batch.seq < 2) continue;
        Tape<Real> tape;
        auto out = forward(tape, w, theta, batch, {});
        const auto& logits = out.logits.value();
        for (int64_t b = 0; b < batch.batch; ++b)
            for (int64_t t = 0; t + 1 < batch.seq; ++t) {
                const int64_t row = b * batch.seq + t;
                const int32_t target = batch.ids[row + 1];
                const Real* lp = logits.data() + row * vocab;
                double mx = lp[0];
                for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, double(lp[c]));
                double z = 0.0;
                for (int64_t c = 0; c < vocab; ++c) z += std::exp(double(lp[c]) - mx);
                total += mx + std::log(z) - double(lp[target]);
                ++count;
            }
    }
    if (count == 0)
        throw InputError("perplexity: no scoreable positions (all windows shorter than 2)");
    return std::exp(total / static_cast<double>(count));
}

template double perplexity<float>(const WeightsT<float>&, const SubNetworkConfig&,
                                  const std::vector<TokenBatch>&);

} // namespace elm
