#include "mlvae/nnet.hpp"

#include <cmath>

namespace mlvae {

Mlp Mlp::make(const std::vector<int>& dims, Act hidden_act, Act out_act,
              Rng& rng) {
  if (dims.size() < 2) throw ValidationError("mlp needs at least two dims");
  for (int d : dims) {
    if (d < 1) throw ValidationError("mlp layer sizes must be >= 1");
  }
  Mlp net;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    Dense layer;
    layer.w.resize(dims[i], dims[i + 1]);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dims[i]));
    for (Eigen::Index k = 0; k < layer.w.size(); ++k)
      layer.w.data()[k] = scale * rng.normal();
    layer.b = Eigen::RowVectorXd::Zero(dims[i + 1]);
    layer.act = (i + 2 == dims.size()) ? out_act : hidden_act;
    layer.gw = Matrix::Zero(dims[i], dims[i + 1]);
    layer.gb = Eigen::RowVectorXd::Zero(dims[i + 1]);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

namespace {

void apply_act(Matrix& y, Act act) {
  switch (act) {
    case Act::Identity:
      break;
    case Act::Tanh:
      y = y.array().tanh();
      break;
    case Act::Sigmoid:
      y = 1.0 / (1.0 + (-y.array()).exp());
      break;
  }
}

Matrix act_grad_times(const Matrix& dy, const Matrix& y, Act act) {
  switch (act) {
    case Act::Identity:
      return dy;
    case Act::Tanh:
      return dy.array() * (1.0 - y.array().square());
    case Act::Sigmoid:
      return dy.array() * y.array() * (1.0 - y.array());
  }
  return dy;
}

}  // namespace

const Matrix& Mlp::forward(const Matrix& x) {
  if (layers.empty()) throw ValidationError("forward through empty mlp");
  if (x.cols() != layers.front().w.rows())
    throw ValidationError("mlp input width mismatch");
  const Matrix* cur = &x;
  for (Dense& layer : layers) {
    layer.x = *cur;
    layer.y = layer.x * layer.w;
    layer.y.rowwise() += layer.b;
    apply_act(layer.y, layer.act);
    cur = &layer.y;
  }
  return layers.back().y;
}

Matrix Mlp::backward_impl(const Matrix& dy, bool want_input_grad) {
  if (layers.empty()) throw ValidationError("backward through empty mlp");
  if (dy.rows() != layers.back().y.rows() || dy.cols() != layers.back().y.cols())
    throw ValidationError("mlp output gradient shape mismatch");
  Matrix cur = dy;
  for (size_t i = layers.size(); i-- > 0;) {
    Dense& layer = layers[i];
    Matrix dpre = act_grad_times(cur, layer.y, layer.act);
    layer.gw.noalias() += layer.x.transpose() * dpre;
    layer.gb += dpre.colwise().sum();
    if (i > 0 || want_input_grad)
      cur.noalias() = dpre * layer.w.transpose();
    else
      cur.resize(0, 0);
  }
  return cur;
}

void Mlp::backward(const Matrix& dy) { backward_impl(dy, false); }

Matrix Mlp::backward_to_input(const Matrix& dy) { return backward_impl(dy, true); }

void Mlp::zero_grad() {
  for (Dense& layer : layers) {
    layer.gw.setZero();
    layer.gb.setZero();
  }
}

long Mlp::param_count() const {
  long n = 0;
  for (const Dense& layer : layers) n += layer.w.size() + layer.b.size();
  return n;
}

std::vector<TensorRef> Mlp::tensors(const std::string& prefix) {
  std::vector<TensorRef> out;
  for (size_t i = 0; i < layers.size(); ++i) {
    Dense& layer = layers[i];
    std::string base = prefix + ".L" + std::to_string(i);
    out.push_back({base + ".w", layer.w.data(), layer.gw.data(), layer.w.size()});
    out.push_back({base + ".b", layer.b.data(), layer.gb.data(), layer.b.size()});
  }
  return out;
}

void Adam::init(const std::vector<TensorRef>& params) {
  m.clear();
  v.clear();
  for (const TensorRef& p : params) {
    m.push_back(Vector::Zero(p.size));
    v.push_back(Vector::Zero(p.size));
  }
  steps = 0;
}

void Adam::step(const std::vector<TensorRef>& params) {
  if (params.size() != m.size())
    throw ValidationError("optimizer state does not match parameter group");

  double sq = 0.0;
  for (const TensorRef& p : params)
    sq += Eigen::Map<const Vector>(p.grad, p.size).squaredNorm();
  const double norm = std::sqrt(sq);
  const double scale = (norm > clip_) ? clip_ / norm : 1.0;

  ++steps;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps));
  for (size_t i = 0; i < params.size(); ++i) {
    const TensorRef& p = params[i];
    if (m[i].size() != p.size)
      throw ValidationError("optimizer state does not match parameter group");
    Eigen::Map<Vector> value(p.value, p.size);
    Eigen::Map<const Vector> grad(p.grad, p.size);
    Vector g = grad * scale;
    m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
    v[i] = beta2_ * v[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    value.array() -=
        lr_ * (m[i].array() / bc1) / ((v[i].array() / bc2).sqrt() + eps_);
  }
}

Matrix context_embed(const Matrix& x, int w) {
  if (w < 0) throw ValidationError("context window must be nonnegative");
  const Eigen::Index t = x.rows();
  const Eigen::Index d = x.cols();
  Matrix out = Matrix::Zero(t, d * (2 * w + 1));
  for (int off = -w; off <= w; ++off) {
    const Eigen::Index col0 = d * (off + w);
    const Eigen::Index lo = std::max<Eigen::Index>(0, -off);
    const Eigen::Index hi = std::min<Eigen::Index>(t, t - off);
    if (hi > lo)
      out.block(lo, col0, hi - lo, d) = x.block(lo + off, 0, hi - lo, d);
  }
  return out;
}

void quantize_f32(const std::vector<TensorRef>& params) {
  for (const TensorRef& p : params) {
    for (Eigen::Index i = 0; i < p.size; ++i)
      p.value[i] = static_cast<double>(static_cast<float>(p.value[i]));
  }
}

void quantize_f32(Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = static_cast<double>(static_cast<float>(v[i]));
}

}  // namespace mlvae
