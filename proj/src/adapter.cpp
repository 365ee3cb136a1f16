#include "cadapt/adapter.hpp"

#include "cadapt/errors.hpp"
#include "cadapt/io.hpp"

namespace cadapt {

namespace {
constexpr char kMagic[8] = {'C', 'A', 'D', 'P', 'A', 'D', 'P', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

template <typename T>
AdapterState<T> AdapterState<T>::init(const AdapterConfig& cfg, std::size_t channels, std::size_t patches,
                                      std::size_t dim, std::size_t horizon) {
    cfg.hpcl.validate();
    if (cfg.dce.rank_for(channels) == 0) throw ConfigError("DCE rank must be positive");
    Rng rng(cfg.seed);
    AdapterState s;
    s.config = cfg;
    s.channels = channels;
    s.patches = patches;
    s.dim = dim;
    s.horizon = horizon;
    s.dce = DceParams<T>::init(channels, dim, cfg.dce, rng);
    s.hd = HdParams<T>::init(cfg.hd_depth, patches, dim, cfg.dual, rng);
    s.hpcl = HpclParams<T>::init(cfg.hpcl);
    s.fusion = FusionParams<T>::init(cfg.fusion_depth, patches, dim, channels, horizon, cfg.dual, cfg.beta_logit_init, rng);
    return s;
}

template <typename T>
NamedParams<T> AdapterState<T>::all_parameters() {
    NamedParams<T> out = dce.parameters();
    for (auto& p : hd.parameters()) out.push_back(p);
    for (auto& p : hpcl.parameters()) out.push_back(p);
    for (auto& p : fusion.parameters()) out.push_back(p);
    return out;
}

template <typename T>
NamedParams<T> AdapterState<T>::trainable_parameters() {
    NamedParams<T> out;
    if (config.hpcl_on && config.dce_mode == DceMode::Full) out = dce.parameters();
    for (auto& p : hd.parameters()) out.push_back(p);
    if (config.hpcl_on && hpcl.epsilon_raw.requires_grad())
        for (auto& p : hpcl.parameters()) out.push_back(p);
    for (auto& p : fusion.parameters()) out.push_back(p);
    return out;
}

template <typename T>
std::size_t AdapterState<T>::trainable_count() {
    std::size_t n = 0;
    for (auto& [name, t] : trainable_parameters()) n += t->numel();
    return n;
}

template <typename T>
std::vector<std::vector<T>> AdapterState<T>::snapshot() {
    std::vector<std::vector<T>> out;
    for (auto& [name, t] : all_parameters()) out.emplace_back(t->data().begin(), t->data().end());
    return out;
}

template <typename T>
void AdapterState<T>::restore(const std::vector<std::vector<T>>& values) {
    auto params = all_parameters();
    if (params.size() != values.size()) throw ShapeError("snapshot does not match adapter layout");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].second->mutable_data();
        if (dst.size() != values[i].size()) throw ShapeError("snapshot size mismatch for " + params[i].first);
        std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
}

template <typename T>
TrainOutputs<T> adapter_forward_train(const AdapterState<T>& s, const BasicTensor<T>& repr, const BasicTensor<T>& pearson,
                                      const BasicTensor<T>& yhat_norm) {
    TrainOutputs<T> out;
    auto [x_pos, x_neg] = divide(s.hd, repr);
    if (s.config.hpcl_on) {
        out.corr = s.config.dce_mode == DceMode::Full ? estimate_correlation(pearson, repr, s.dce, s.config.dce) : pearson;
        const auto masks = threshold_masks(out.corr, s.hpcl.epsilon(), s.config.hpcl);
        auto aux = aux_loss(x_pos, x_neg, masks, s.config.hpcl.tau);
        out.l_pos = aux.pos;
        out.l_neg = aux.neg;
        out.l_aux = aux.total;
    } else {
        out.l_pos = out.l_neg = out.l_aux = BasicTensor<T>::scalar(T(0));
    }
    out.ystar = fuse_predict(s.fusion, x_pos, x_neg, yhat_norm).ystar;
    out.x_pos = std::move(x_pos);
    out.x_neg = std::move(x_neg);
    return out;
}

template <typename T>
BasicTensor<T> adapter_forward_infer(const AdapterState<T>& s, const BasicTensor<T>& repr, const BasicTensor<T>& yhat_norm) {
    const auto [x_pos, x_neg] = divide(s.hd, repr);
    return fuse_predict(s.fusion, x_pos, x_neg, yhat_norm).ystar;
}

void save_adapter(AdapterState<double>& s, const std::filesystem::path& path) {
    BinaryWriter w;
    w.bytes(std::string_view(kMagic, sizeof kMagic));
    w.u32(kVersion);
    w.u32(0);
    w.u64(s.channels);
    w.u64(s.patches);
    w.u64(s.dim);
    w.u64(s.horizon);
    auto params = s.all_parameters();
    w.u64(params.size());
    for (auto& [name, t] : params) {
        w.u64(name.size());
        w.bytes(name);
        w.u64(t->numel());
        w.f64s(t->data());
    }
    write_file_atomic(path, w.buffer());
}

AdapterState<double> load_adapter(const std::filesystem::path& path, const AdapterConfig& cfg) {
    BinaryReader r(path);
    if (r.bytes(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) throw DataError(path.string() + ": not an adapter file");
    if (const auto v = r.u32(); v != kVersion) throw DataError(path.string() + ": unsupported version " + std::to_string(v));
    r.u32();
    const std::size_t n = r.u64(), p = r.u64(), d = r.u64(), f = r.u64();
    auto s = AdapterState<double>::init(cfg, n, p, d, f);
    auto params = s.all_parameters();
    const std::size_t count = r.u64();
    if (count != params.size())
        throw DataError(path.string() + ": holds " + std::to_string(count) + " tensors, config expects " + std::to_string(params.size()));
    for (auto& [name, t] : params) {
        const std::string stored = r.bytes(r.u64());
        if (stored != name) throw DataError(path.string() + ": expected tensor '" + name + "', found '" + stored + "'");
        const std::size_t numel = r.u64();
        if (numel != t->numel()) throw DataError(path.string() + ": size mismatch for " + name);
        const auto values = r.f64s(numel);
        std::copy(values.begin(), values.end(), t->mutable_data().begin());
    }
    if (!r.at_end()) throw DataError(path.string() + ": trailing bytes");
    return s;
}

template struct AdapterState<double>;
template struct AdapterState<float>;
template TrainOutputs<double> adapter_forward_train(const AdapterState<double>&, const Tensor&, const Tensor&, const Tensor&);
template TrainOutputs<float> adapter_forward_train(const AdapterState<float>&, const TensorF&, const TensorF&, const TensorF&);
template Tensor adapter_forward_infer(const AdapterState<double>&, const Tensor&, const Tensor&);
template TensorF adapter_forward_infer(const AdapterState<float>&, const TensorF&, const TensorF&);

}  // namespace cadapt
