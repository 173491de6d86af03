#include "gradcheck.hpp"

namespace gradcheck {

namespace {

using ildlab::Rng;
using ildlab::Shape;
using ildlab::Tape;
using ildlab::Tensor;

// quadratic readout so gradients are nonzero almost everywhere
Tensor scalarize(const Tensor& y) {
    return ildlab::mean_all(ildlab::mul(y, ildlab::add_scalar(ildlab::scale(y, 0.5), 0.3)));
}

} // namespace

std::vector<OpCase> op_battery() {
    std::vector<OpCase> cases;
    auto def = [&cases](std::string name, std::function<double(std::uint64_t)> run) {
        cases.push_back(OpCase{std::move(name), std::move(run)});
    };

    def("add", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "add");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::add(in[0], in[1]));
                             });
    });
    def("sub", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "sub");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::sub(in[0], in[1]));
                             });
    });
    def("mul", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "mul");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::mul(in[0], in[1]));
                             });
    });
    def("scale", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "scale");
        return max_rel_error({random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::scale(in[0], 1.7));
                             });
    });
    def("add_scalar", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "add_scalar");
        return max_rel_error({random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::add_scalar(in[0], 0.9));
                             });
    });
    def("add_bias", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "add_bias");
        return max_rel_error({random_tensor({2, 3, 4}, r), random_tensor({4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::add_bias(in[0], in[1]));
                             });
    });
    def("matmul", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "matmul");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({4, 5}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::matmul(in[0], in[1]));
                             });
    });
    def("matmul_nt", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "matmul_nt");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({5, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::matmul_nt(in[0], in[1]));
                             });
    });
    def("linear", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "linear");
        return max_rel_error({random_tensor({2, 3, 4}, r), random_tensor({4, 5}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::linear(in[0], in[1]));
                             });
    });
    def("bmm", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "bmm");
        return max_rel_error({random_tensor({2, 3, 4}, r), random_tensor({2, 4, 5}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::bmm(in[0], in[1]));
                             });
    });
    def("bmm_nt", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "bmm_nt");
        return max_rel_error({random_tensor({2, 3, 4}, r), random_tensor({2, 5, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::bmm_nt(in[0], in[1]));
                             });
    });
    def("reshape", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "reshape");
        return max_rel_error({random_tensor({2, 6}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::reshape(in[0], {3, 4}));
                             });
    });
    def("concat_lastdim", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "concat_lastdim");
        return max_rel_error(
            {random_tensor({2, 3}, r), random_tensor({2, 2}, r), random_tensor({2, 4}, r)},
            [](Tape&, std::vector<Tensor>& in) {
                return scalarize(ildlab::concat_lastdim({in[0], in[1], in[2]}));
            });
    });
    def("select_pos", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "select_pos");
        return max_rel_error({random_tensor({2, 4, 3}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::select_pos(in[0], 2));
                             });
    });
    def("embedding_lookup", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "embedding_lookup");
        const std::vector<std::size_t> ids{0, 2, 2, 5, 1, 2};
        return max_rel_error({random_tensor({6, 4}, r)},
                             [ids](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(
                                     ildlab::embedding_lookup(in[0], ids, {2, 3}));
                             });
    });
    def("gelu", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "gelu");
        return max_rel_error({random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::gelu(in[0]));
                             });
    });
    def("softmax_rows", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "softmax_rows");
        return max_rel_error({random_tensor({3, 5}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::softmax_rows(in[0]));
                             });
    });
    def("layer_norm", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "layer_norm");
        Tensor gain = random_tensor({6}, r, 0.2);
        for (double& v : gain.v())
            v += 1.0;
        return max_rel_error({random_tensor({2, 3, 6}, r), gain, random_tensor({6}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::layer_norm(in[0], in[1], in[2]));
                             });
    });
    def("dropout", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "dropout");
        return max_rel_error({random_tensor({4, 5}, r)},
                             [s](Tape&, std::vector<Tensor>& in) {
                                 Rng mask_rng(s + 17);
                                 return scalarize(ildlab::dropout(in[0], 0.3, mask_rng));
                             });
    });
    def("l2_normalize_rows", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "l2_normalize_rows");
        return max_rel_error({random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::l2_normalize_rows(in[0]));
                             });
    });
    def("mixup", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "mixup");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::mixup(in[0], in[1], 0.37));
                             });
    });
    def("mixup_endpoint", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "mixup_endpoint");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return scalarize(ildlab::mixup(in[0], in[1], 1.0));
                             });
    });
    def("sum_all", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "sum_all");
        return max_rel_error({random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return ildlab::sum_all(ildlab::mul(in[0], in[0]));
                             });
    });
    def("mean_all", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "mean_all");
        return max_rel_error({random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return ildlab::mean_all(ildlab::mul(in[0], in[0]));
                             });
    });
    def("kld_rows", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "kld_rows");
        return max_rel_error({random_tensor({3, 5}, r), random_tensor({3, 5}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return ildlab::kld_rows(ildlab::softmax_rows(in[0]),
                                                         ildlab::softmax_rows(in[1]));
                             });
    });
    def("mse", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "mse");
        return max_rel_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                             [](Tape&, std::vector<Tensor>& in) {
                                 return ildlab::mse(in[0], in[1]);
                             });
    });
    def("mse_masked", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "mse_masked");
        const std::vector<double> mask{1, 0, 1, 1, 1, 0};
        return max_rel_error({random_tensor({2, 3, 4}, r), random_tensor({2, 3, 4}, r)},
                             [mask](Tape&, std::vector<Tensor>& in) {
                                 return ildlab::mse_masked(in[0], in[1], mask);
                             });
    });
    def("soft_cross_entropy", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "soft_cross_entropy");
        Tensor zt = random_tensor({3, 4}, r);
        return max_rel_error({random_tensor({3, 4}, r)},
                             [zt](Tape&, std::vector<Tensor>& in) {
                                 return ildlab::soft_cross_entropy(zt, in[0], 2.0);
                             });
    });
    def("cross_entropy_labels", [](std::uint64_t s) {
        Rng r = Rng::stream(s, "cross_entropy_labels");
        const std::vector<std::size_t> y{1, 0, 3};
        return max_rel_error({random_tensor({3, 4}, r)},
                             [y](Tape&, std::vector<Tensor>& in) {
                                 return ildlab::cross_entropy_labels(in[0], y);
                             });
    });
    return cases;
}

} // namespace gradcheck
