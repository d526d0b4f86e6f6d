#include "efb/tape.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace efb::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

}  // namespace

const Shape& Var::shape() const { return tape->node(id).shape; }
const std::vector<double>& Var::value() const { return tape->node(id).val; }

int Tape::push(Shape shape, bool needs_grad) {
  Node n;
  n.shape = std::move(shape);
  n.val.assign(static_cast<std::size_t>(numel(n.shape)), 0.0);
  n.needs_grad = needs_grad;
  if (needs_grad) n.grad.assign(n.val.size(), 0.0);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::constant(Tensor t) {
  int id = push(t.shape, false);
  node(id).val = std::move(t.v);
  return {this, id};
}

Var Tape::constant(Shape shape, std::vector<double> data) {
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("constant: data size does not match shape");
  }
  int id = push(std::move(shape), false);
  node(id).val = std::move(data);
  return {this, id};
}

Var Tape::scalar(double v) { return constant(Shape{}, {v}); }

Var Tape::param(Param& p) {
  int id = push(p.value.shape, true);
  Node& n = node(id);
  n.val = p.value.v;
  n.bound = &p;
  n.back = [](Tape&, Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) self.bound->grad.v[i] += self.grad[i];
  };
  return {this, id};
}

Var Tape::make_unary(Var x, Shape out_shape,
                     const std::function<void(const Node&, Node&)>& fwd,
                     const std::function<void(Tape&, Node&)>& bwd) {
  const Node& xn = node(x.id);
  int id = push(std::move(out_shape), xn.needs_grad);
  Node& n = node(id);
  fwd(node(x.id), n);
  if (n.needs_grad) n.back = bwd;
  return {this, id};
}

Var Tape::affine(Var x, double mul, double add) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [mul, add](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = mul * xn.val[i] + add;
      },
      [xid, mul](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += mul * self.grad[i];
      });
}

Var Tape::relu(Var x) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = xn.val[i] > 0.0 ? xn.val[i] : 0.0;
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (xn.val[i] > 0.0) xn.grad[i] += self.grad[i];
        }
      });
}

Var Tape::sigmoid(Var x) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = stable_sigmoid(xn.val[i]);
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          xn.grad[i] += self.grad[i] * self.val[i] * (1.0 - self.val[i]);
        }
      });
}

Var Tape::logv(Var x) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::log(xn.val[i]);
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i] / xn.val[i];
      });
}

Var Tape::sqrtv(Var x) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::sqrt(xn.val[i]);
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          xn.grad[i] += self.grad[i] / (2.0 * self.val[i]);
        }
      });
}

Var Tape::cosv(Var x) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::cos(xn.val[i]);
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          xn.grad[i] -= self.grad[i] * std::sin(xn.val[i]);
        }
      });
}

Var Tape::sinv(Var x) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::sin(xn.val[i]);
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          xn.grad[i] += self.grad[i] * std::cos(xn.val[i]);
        }
      });
}

Var Tape::quantize_ste(Var x) {
  int xid = x.id;
  return make_unary(
      x, node(x.id).shape,
      [](const Node& xn, Node& n) {
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          n.val[i] = stable_sigmoid(xn.val[i]) - 0.5 >= 0.0 ? 1.0 : -1.0;
        }
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double s = stable_sigmoid(xn.val[i]);
          xn.grad[i] += self.grad[i] * 2.0 * s * (1.0 - s);
        }
      });
}

namespace {

/// Row-major strides with zeros on broadcast (size-1) dims.
std::vector<std::int64_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> full(in.size(), 0);
  std::int64_t acc = 1;
  for (int d = static_cast<int>(in.size()) - 1; d >= 0; --d) {
    full[static_cast<std::size_t>(d)] = acc;
    acc *= in[static_cast<std::size_t>(d)];
  }
  std::vector<std::int64_t> s(out.size(), 0);
  for (std::size_t d = 0; d < out.size(); ++d) {
    s[d] = (in[d] == out[d]) ? full[d] : 0;
  }
  return s;
}

/// Odometer over `out`, invoking f(out_index, a_offset, b_offset).
template <typename F>
void for_each_bcast(const Shape& out, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t total = numel(out);
  const int rank = static_cast<int>(out.size());
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t oa = 0;
  std::int64_t ob = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    f(i, oa, ob);
    for (int d = rank - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < out[du]) break;
      oa -= sa[du] * out[du];
      ob -= sb[du] * out[du];
      idx[du] = 0;
    }
  }
}

}  // namespace

Var Tape::binary_broadcast(Var a, Var b, int op) {
  const Node& an = node(a.id);
  const Node& bn = node(b.id);
  if (an.shape.size() != bn.shape.size()) shape_error("binary op", an.shape, bn.shape);
  Shape out(an.shape.size());
  for (std::size_t d = 0; d < out.size(); ++d) {
    int da = an.shape[d];
    int db = bn.shape[d];
    if (da != db && da != 1 && db != 1) shape_error("binary op", an.shape, bn.shape);
    out[d] = std::max(da, db);
  }

  const bool same = an.shape == bn.shape;
  int id = push(out, an.needs_grad || bn.needs_grad);
  Node& n = node(id);

  auto apply = [op](double x, double y) {
    switch (op) {
      case 0: return x + y;
      case 1: return x - y;
      case 2: return x * y;
      default: return x / y;
    }
  };

  if (same) {
    const auto& av = node(a.id).val;
    const auto& bv = node(b.id).val;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = apply(av[i], bv[i]);
  } else {
    auto sa = bcast_strides(an.shape, out);
    auto sb = bcast_strides(bn.shape, out);
    const auto& av = node(a.id).val;
    const auto& bv = node(b.id).val;
    for_each_bcast(out, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      n.val[static_cast<std::size_t>(i)] =
          apply(av[static_cast<std::size_t>(oa)], bv[static_cast<std::size_t>(ob)]);
    });
  }

  if (n.needs_grad) {
    int aid = a.id;
    int bid = b.id;
    Shape out_shape = out;
    n.back = [aid, bid, op, out_shape](Tape& t, Node& self) {
      Node& an2 = t.node(aid);
      Node& bn2 = t.node(bid);
      auto sa = bcast_strides(an2.shape, out_shape);
      auto sb = bcast_strides(bn2.shape, out_shape);
      for_each_bcast(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
        const double g = self.grad[static_cast<std::size_t>(i)];
        const double xa = an2.val[static_cast<std::size_t>(oa)];
        const double xb = bn2.val[static_cast<std::size_t>(ob)];
        double ga = 0.0;
        double gb = 0.0;
        switch (op) {
          case 0: ga = g; gb = g; break;
          case 1: ga = g; gb = -g; break;
          case 2: ga = g * xb; gb = g * xa; break;
          default: ga = g / xb; gb = -g * xa / (xb * xb); break;
        }
        if (an2.needs_grad) an2.grad[static_cast<std::size_t>(oa)] += ga;
        if (bn2.needs_grad) bn2.grad[static_cast<std::size_t>(ob)] += gb;
      });
    };
  }
  return {this, id};
}

Var Tape::add(Var a, Var b) { return binary_broadcast(a, b, 0); }
Var Tape::sub(Var a, Var b) { return binary_broadcast(a, b, 1); }
Var Tape::mul(Var a, Var b) { return binary_broadcast(a, b, 2); }
Var Tape::divv(Var a, Var b) { return binary_broadcast(a, b, 3); }

Var Tape::reshape(Var x, Shape s) {
  const Node& xn = node(x.id);
  if (numel(s) != numel(xn.shape)) shape_error("reshape", xn.shape, s);
  int xid = x.id;
  return make_unary(
      x, std::move(s), [](const Node& in, Node& n) { n.val = in.val; },
      [xid](Tape& t, Node& self) {
        Node& xn2 = t.node(xid);
        if (!xn2.needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn2.grad[i] += self.grad[i];
      });
}

Var Tape::permute_last2(Var x) {
  const Node& xn = node(x.id);
  if (xn.shape.size() < 2) throw std::invalid_argument("permute_last2: rank must be >= 2");
  Shape out = xn.shape;
  const int a = out[out.size() - 2];
  const int b = out[out.size() - 1];
  std::swap(out[out.size() - 2], out[out.size() - 1]);
  const std::int64_t batch = numel(xn.shape) / (static_cast<std::int64_t>(a) * b);
  int xid = x.id;
  return make_unary(
      x, std::move(out),
      [a, b, batch](const Node& in, Node& n) {
        for (std::int64_t g = 0; g < batch; ++g) {
          const double* src = in.val.data() + g * a * b;
          double* dst = n.val.data() + g * a * b;
          for (int i = 0; i < a; ++i)
            for (int j = 0; j < b; ++j) dst[j * a + i] = src[i * b + j];
        }
      },
      [xid, a, b, batch](Tape& t, Node& self) {
        Node& xn2 = t.node(xid);
        if (!xn2.needs_grad) return;
        for (std::int64_t g = 0; g < batch; ++g) {
          const double* gsrc = self.grad.data() + g * a * b;
          double* gdst = xn2.grad.data() + g * a * b;
          for (int i = 0; i < a; ++i)
            for (int j = 0; j < b; ++j) gdst[i * b + j] += gsrc[j * a + i];
        }
      });
}

Var Tape::stack_axis1(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack_axis1: empty input list");
  const Shape& s0 = node(xs[0].id).shape;
  bool needs = false;
  for (const Var& v : xs) {
    if (node(v.id).shape != s0) shape_error("stack_axis1", node(v.id).shape, s0);
    needs = needs || node(v.id).needs_grad;
  }
  const int n_batch = s0[0];
  const std::int64_t block = numel(s0) / n_batch;
  const int k = static_cast<int>(xs.size());

  Shape out;
  out.push_back(n_batch);
  out.push_back(k);
  for (std::size_t d = 1; d < s0.size(); ++d) out.push_back(s0[d]);

  int id = push(std::move(out), needs);
  Node& n = node(id);
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (const Var& v : xs) ids.push_back(v.id);

  for (int b = 0; b < n_batch; ++b) {
    for (int i = 0; i < k; ++i) {
      const double* src = node(ids[static_cast<std::size_t>(i)]).val.data() + b * block;
      double* dst = n.val.data() + (static_cast<std::int64_t>(b) * k + i) * block;
      std::copy(src, src + block, dst);
    }
  }
  if (needs) {
    n.back = [ids, n_batch, k, block](Tape& t, Node& self) {
      for (int i = 0; i < k; ++i) {
        Node& xn = t.node(ids[static_cast<std::size_t>(i)]);
        if (!xn.needs_grad) continue;
        for (int b = 0; b < n_batch; ++b) {
          const double* gsrc = self.grad.data() + (static_cast<std::int64_t>(b) * k + i) * block;
          double* gdst = xn.grad.data() + b * block;
          for (std::int64_t j = 0; j < block; ++j) gdst[j] += gsrc[j];
        }
      }
    };
  }
  return {this, id};
}

Var Tape::select_axis1(Var x, int index) {
  const Node& xn = node(x.id);
  if (xn.shape.size() < 2) throw std::invalid_argument("select_axis1: rank must be >= 2");
  const int n_batch = xn.shape[0];
  const int k = xn.shape[1];
  if (index < 0 || index >= k) throw std::invalid_argument("select_axis1: index out of range");
  Shape out;
  out.push_back(n_batch);
  for (std::size_t d = 2; d < xn.shape.size(); ++d) out.push_back(xn.shape[d]);
  const std::int64_t block = numel(xn.shape) / (static_cast<std::int64_t>(n_batch) * k);
  int xid = x.id;
  return make_unary(
      x, std::move(out),
      [n_batch, k, block, index](const Node& in, Node& n) {
        for (int b = 0; b < n_batch; ++b) {
          const double* src = in.val.data() + (static_cast<std::int64_t>(b) * k + index) * block;
          std::copy(src, src + block, n.val.data() + b * block);
        }
      },
      [xid, n_batch, k, block, index](Tape& t, Node& self) {
        Node& xn2 = t.node(xid);
        if (!xn2.needs_grad) return;
        for (int b = 0; b < n_batch; ++b) {
          const double* gsrc = self.grad.data() + b * block;
          double* gdst = xn2.grad.data() + (static_cast<std::int64_t>(b) * k + index) * block;
          for (std::int64_t j = 0; j < block; ++j) gdst[j] += gsrc[j];
        }
      });
}

Var Tape::slice_last(Var x, int start, int len) {
  const Node& xn = node(x.id);
  if (xn.shape.empty()) throw std::invalid_argument("slice_last: scalar input");
  const int m = xn.shape.back();
  if (start < 0 || len < 1 || start + len > m) {
    throw std::invalid_argument("slice_last: range out of bounds");
  }
  const std::int64_t rows = numel(xn.shape) / m;
  Shape out = xn.shape;
  out.back() = len;
  int xid = x.id;
  return make_unary(
      x, std::move(out),
      [rows, m, start, len](const Node& in, Node& n) {
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* src = in.val.data() + r * m + start;
          std::copy(src, src + len, n.val.data() + r * len);
        }
      },
      [xid, rows, m, start, len](Tape& t, Node& self) {
        Node& xn2 = t.node(xid);
        if (!xn2.needs_grad) return;
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* gsrc = self.grad.data() + r * len;
          double* gdst = xn2.grad.data() + r * m + start;
          for (int j = 0; j < len; ++j) gdst[j] += gsrc[j];
        }
      });
}

Var Tape::split_heads(Var x, int heads) {
  const Node& xn = node(x.id);
  if (xn.shape.size() != 3) throw std::invalid_argument("split_heads: expected rank-3 input");
  const int n = xn.shape[0];
  const int t_len = xn.shape[1];
  const int d = xn.shape[2];
  if (d % heads != 0) throw std::invalid_argument("split_heads: dim not divisible by head count");
  const int dh = d / heads;
  int xid = x.id;
  return make_unary(
      x, Shape{n * heads, t_len, dh},
      [n, t_len, d, heads, dh](const Node& in, Node& out) {
        for (int b = 0; b < n; ++b)
          for (int h = 0; h < heads; ++h)
            for (int t = 0; t < t_len; ++t) {
              const double* src = in.val.data() + (static_cast<std::int64_t>(b) * t_len + t) * d + h * dh;
              double* dst = out.val.data() +
                            ((static_cast<std::int64_t>(b) * heads + h) * t_len + t) * dh;
              std::copy(src, src + dh, dst);
            }
      },
      [xid, n, t_len, d, heads, dh](Tape& tp, Node& self) {
        Node& xn2 = tp.node(xid);
        if (!xn2.needs_grad) return;
        for (int b = 0; b < n; ++b)
          for (int h = 0; h < heads; ++h)
            for (int t = 0; t < t_len; ++t) {
              const double* gsrc = self.grad.data() +
                                   ((static_cast<std::int64_t>(b) * heads + h) * t_len + t) * dh;
              double* gdst =
                  xn2.grad.data() + (static_cast<std::int64_t>(b) * t_len + t) * d + h * dh;
              for (int c = 0; c < dh; ++c) gdst[c] += gsrc[c];
            }
      });
}

Var Tape::merge_heads(Var x, int heads) {
  const Node& xn = node(x.id);
  if (xn.shape.size() != 3) throw std::invalid_argument("merge_heads: expected rank-3 input");
  if (xn.shape[0] % heads != 0) {
    throw std::invalid_argument("merge_heads: batch not divisible by head count");
  }
  const int n = xn.shape[0] / heads;
  const int t_len = xn.shape[1];
  const int dh = xn.shape[2];
  const int d = dh * heads;
  int xid = x.id;
  return make_unary(
      x, Shape{n, t_len, d},
      [n, t_len, d, heads, dh](const Node& in, Node& out) {
        for (int b = 0; b < n; ++b)
          for (int h = 0; h < heads; ++h)
            for (int t = 0; t < t_len; ++t) {
              const double* src = in.val.data() +
                                  ((static_cast<std::int64_t>(b) * heads + h) * t_len + t) * dh;
              double* dst =
                  out.val.data() + (static_cast<std::int64_t>(b) * t_len + t) * d + h * dh;
              std::copy(src, src + dh, dst);
            }
      },
      [xid, n, t_len, d, heads, dh](Tape& tp, Node& self) {
        Node& xn2 = tp.node(xid);
        if (!xn2.needs_grad) return;
        for (int b = 0; b < n; ++b)
          for (int h = 0; h < heads; ++h)
            for (int t = 0; t < t_len; ++t) {
              const double* gsrc =
                  self.grad.data() + (static_cast<std::int64_t>(b) * t_len + t) * d + h * dh;
              double* gdst = xn2.grad.data() +
                             ((static_cast<std::int64_t>(b) * heads + h) * t_len + t) * dh;
              for (int c = 0; c < dh; ++c) gdst[c] += gsrc[c];
            }
      });
}

Var Tape::sum_all(Var x) {
  int xid = x.id;
  return make_unary(
      x, Shape{},
      [](const Node& in, Node& n) {
        double acc = 0.0;
        for (double v : in.val) acc += v;
        n.val[0] = acc;
      },
      [xid](Tape& t, Node& self) {
        Node& xn = t.node(xid);
        if (!xn.needs_grad) return;
        for (std::size_t i = 0; i < xn.grad.size(); ++i) xn.grad[i] += self.grad[0];
      });
}

Var Tape::mean_all(Var x) {
  const double inv = 1.0 / static_cast<double>(numel(node(x.id).shape));
  return affine(sum_all(x), inv, 0.0);
}

Var Tape::sum_last(Var x) {
  const Node& xn = node(x.id);
  if (xn.shape.empty()) throw std::invalid_argument("sum_last: scalar input");
  const int m = xn.shape.back();
  const std::int64_t rows = numel(xn.shape) / m;
  Shape out(xn.shape.begin(), xn.shape.end() - 1);
  int xid = x.id;
  return make_unary(
      x, std::move(out),
      [rows, m](const Node& in, Node& n) {
        for (std::int64_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          const double* src = in.val.data() + r * m;
          for (int j = 0; j < m; ++j) acc += src[j];
          n.val[static_cast<std::size_t>(r)] = acc;
        }
      },
      [xid, rows, m](Tape& t, Node& self) {
        Node& xn2 = t.node(xid);
        if (!xn2.needs_grad) return;
        for (std::int64_t r = 0; r < rows; ++r) {
          const double g = self.grad[static_cast<std::size_t>(r)];
          double* gdst = xn2.grad.data() + r * m;
          for (int j = 0; j < m; ++j) gdst[j] += g;
        }
      });
}

Var Tape::mean_last(Var x) {
  const double inv = 1.0 / static_cast<double>(node(x.id).shape.back());
  return affine(sum_last(x), inv, 0.0);
}

Var Tape::diag_last2(Var x) {
  const Node& xn = node(x.id);
  if (xn.shape.size() < 2 || xn.shape[xn.shape.size() - 1] != xn.shape[xn.shape.size() - 2]) {
    throw std::invalid_argument("diag_last2: trailing dims must be square");
  }
  const int k = xn.shape.back();
  const std::int64_t batch = numel(xn.shape) / (static_cast<std::int64_t>(k) * k);
  Shape out(xn.shape.begin(), xn.shape.end() - 1);
  int xid = x.id;
  return make_unary(
      x, std::move(out),
      [batch, k](const Node& in, Node& n) {
        for (std::int64_t b = 0; b < batch; ++b)
          for (int i = 0; i < k; ++i) {
            n.val[static_cast<std::size_t>(b * k + i)] =
                in.val[static_cast<std::size_t>((b * k + i) * k + i)];
          }
      },
      [xid, batch, k](Tape& t, Node& self) {
        Node& xn2 = t.node(xid);
        if (!xn2.needs_grad) return;
        for (std::int64_t b = 0; b < batch; ++b)
          for (int i = 0; i < k; ++i) {
            xn2.grad[static_cast<std::size_t>((b * k + i) * k + i)] +=
                self.grad[static_cast<std::size_t>(b * k + i)];
          }
      });
}

Var Tape::linear(Var x, Var w, Var b) {
  const Node& xn = node(x.id);
  const Node& wn = node(w.id);
  if (xn.shape.empty() || wn.shape.size() != 2) {
    throw std::invalid_argument("linear: expected x rank >= 1 and w rank 2");
  }
  const int in_dim = xn.shape.back();
  const int out_dim = wn.shape[0];
  if (wn.shape[1] != in_dim) shape_error("linear", xn.shape, wn.shape);
  const bool has_bias = b.valid();
  if (has_bias && (node(b.id).shape.size() != 1 || node(b.id).shape[0] != out_dim)) {
    shape_error("linear bias", node(b.id).shape, wn.shape);
  }
  const std::int64_t m = numel(xn.shape) / in_dim;

  Shape out = xn.shape;
  out.back() = out_dim;
  bool needs = xn.needs_grad || wn.needs_grad || (has_bias && node(b.id).needs_grad);
  int id = push(std::move(out), needs);
  Node& n = node(id);

  {
    MapConst xm(node(x.id).val.data(), m, in_dim);
    MapConst wm(node(w.id).val.data(), out_dim, in_dim);
    MapMat ym(n.val.data(), m, out_dim);
    ym.noalias() = xm * wm.transpose();
    if (has_bias) {
      Eigen::Map<const Eigen::RowVectorXd> bm(node(b.id).val.data(), out_dim);
      ym.rowwise() += bm;
    }
  }

  if (needs) {
    int xid = x.id;
    int wid = w.id;
    int bid = has_bias ? b.id : -1;
    n.back = [xid, wid, bid, m, in_dim, out_dim](Tape& t, Node& self) {
      MapConst gm(self.grad.data(), m, out_dim);
      Node& xn2 = t.node(xid);
      Node& wn2 = t.node(wid);
      if (xn2.needs_grad) {
        MapConst wm(wn2.val.data(), out_dim, in_dim);
        MapMat gx(xn2.grad.data(), m, in_dim);
        gx.noalias() += gm * wm;
      }
      if (wn2.needs_grad) {
        MapConst xm(xn2.val.data(), m, in_dim);
        MapMat gw(wn2.grad.data(), out_dim, in_dim);
        gw.noalias() += gm.transpose() * xm;
      }
      if (bid >= 0) {
        Node& bn2 = t.node(bid);
        if (bn2.needs_grad) {
          Eigen::Map<Eigen::RowVectorXd> gb(bn2.grad.data(), out_dim);
          gb += gm.colwise().sum();
        }
      }
    };
  }
  return {this, id};
}

Var Tape::bmm(Var a, Var b, bool trans_a, bool trans_b) {
  const Node& an = node(a.id);
  const Node& bn = node(b.id);
  if (an.shape.size() != 3 || bn.shape.size() != 3 || an.shape[0] != bn.shape[0]) {
    throw std::invalid_argument("bmm: expected rank-3 operands with matching batch");
  }
  const int g_count = an.shape[0];
  const int m = trans_a ? an.shape[2] : an.shape[1];
  const int ka = trans_a ? an.shape[1] : an.shape[2];
  const int kb = trans_b ? bn.shape[2] : bn.shape[1];
  const int p = trans_b ? bn.shape[1] : bn.shape[2];
  if (ka != kb) shape_error("bmm", an.shape, bn.shape);

  bool needs = an.needs_grad || bn.needs_grad;
  int id = push(Shape{g_count, m, p}, needs);
  Node& n = node(id);

  const std::int64_t a_block = static_cast<std::int64_t>(an.shape[1]) * an.shape[2];
  const std::int64_t b_block = static_cast<std::int64_t>(bn.shape[1]) * bn.shape[2];
  const std::int64_t y_block = static_cast<std::int64_t>(m) * p;

  for (int g = 0; g < g_count; ++g) {
    MapConst am(node(a.id).val.data() + g * a_block, an.shape[1], an.shape[2]);
    MapConst bm2(node(b.id).val.data() + g * b_block, bn.shape[1], bn.shape[2]);
    MapMat ym(n.val.data() + g * y_block, m, p);
    if (!trans_a && !trans_b) ym.noalias() = am * bm2;
    else if (trans_a && !trans_b) ym.noalias() = am.transpose() * bm2;
    else if (!trans_a && trans_b) ym.noalias() = am * bm2.transpose();
    else ym.noalias() = am.transpose() * bm2.transpose();
  }

  if (needs) {
    int aid = a.id;
    int bid = b.id;
    n.back = [aid, bid, trans_a, trans_b, g_count, m, p, a_block, b_block, y_block](Tape& t,
                                                                                    Node& self) {
      Node& an2 = t.node(aid);
      Node& bn2 = t.node(bid);
      for (int g = 0; g < g_count; ++g) {
        MapConst gm(self.grad.data() + g * y_block, m, p);
        MapConst am(an2.val.data() + g * a_block, an2.shape[1], an2.shape[2]);
        MapConst bm2(bn2.val.data() + g * b_block, bn2.shape[1], bn2.shape[2]);
        if (an2.needs_grad) {
          MapMat ga(an2.grad.data() + g * a_block, an2.shape[1], an2.shape[2]);
          // dAeff = G * Beff^T, folded back through trans_a.
          if (!trans_b) {
            if (!trans_a) ga.noalias() += gm * bm2.transpose();
            else ga.noalias() += bm2 * gm.transpose();
          } else {
            if (!trans_a) ga.noalias() += gm * bm2;
            else ga.noalias() += bm2.transpose() * gm.transpose();
          }
        }
        if (bn2.needs_grad) {
          MapMat gb(bn2.grad.data() + g * b_block, bn2.shape[1], bn2.shape[2]);
          // dBeff = Aeff^T * G, folded back through trans_b.
          if (!trans_a) {
            if (!trans_b) gb.noalias() += am.transpose() * gm;
            else gb.noalias() += gm.transpose() * am;
          } else {
            if (!trans_b) gb.noalias() += am * gm;
            else gb.noalias() += gm.transpose() * am.transpose();
          }
        }
      }
    };
  }
  return {this, id};
}

Var Tape::conv1d(Var x, Var w, Var b) {
  const Node& xn = node(x.id);
  const Node& wn = node(w.id);
  if (xn.shape.size() != 3 || wn.shape.size() != 3) {
    throw std::invalid_argument("conv1d: expected rank-3 input and kernel");
  }
  const int n_batch = xn.shape[0];
  const int c_in = xn.shape[1];
  const int length = xn.shape[2];
  const int c_out = wn.shape[0];
  const int width = wn.shape[2];
  if (wn.shape[1] != c_in) shape_error("conv1d", xn.shape, wn.shape);
  if (width % 2 == 0) throw std::invalid_argument("conv1d: kernel width must be odd");
  const int pad = (width - 1) / 2;
  const bool has_bias = b.valid();
  if (has_bias && (node(b.id).shape.size() != 1 || node(b.id).shape[0] != c_out)) {
    shape_error("conv1d bias", node(b.id).shape, wn.shape);
  }

  bool needs = xn.needs_grad || wn.needs_grad || (has_bias && node(b.id).needs_grad);
  int id = push(Shape{n_batch, c_out, length}, needs);
  Node& n = node(id);

  const auto& xv = node(x.id).val;
  const auto& wv = node(w.id).val;
  for (int nb = 0; nb < n_batch; ++nb) {
    for (int co = 0; co < c_out; ++co) {
      double* dst = n.val.data() + (static_cast<std::int64_t>(nb) * c_out + co) * length;
      const double bias = has_bias ? node(b.id).val[static_cast<std::size_t>(co)] : 0.0;
      for (int l = 0; l < length; ++l) dst[l] = bias;
      for (int ci = 0; ci < c_in; ++ci) {
        const double* src = xv.data() + (static_cast<std::int64_t>(nb) * c_in + ci) * length;
        const double* ker = wv.data() + (static_cast<std::int64_t>(co) * c_in + ci) * width;
        for (int t = 0; t < width; ++t) {
          const double kv = ker[t];
          if (kv == 0.0) continue;
          const int off = t - pad;
          const int lo = std::max(0, -off);
          const int hi = std::min(length, length - off);
          for (int l = lo; l < hi; ++l) dst[l] += kv * src[l + off];
        }
      }
    }
  }

  if (needs) {
    int xid = x.id;
    int wid = w.id;
    int bid = has_bias ? b.id : -1;
    n.back = [xid, wid, bid, n_batch, c_in, c_out, length, width, pad](Tape& t, Node& self) {
      Node& xn2 = t.node(xid);
      Node& wn2 = t.node(wid);
      for (int nb = 0; nb < n_batch; ++nb) {
        for (int co = 0; co < c_out; ++co) {
          const double* g = self.grad.data() + (static_cast<std::int64_t>(nb) * c_out + co) * length;
          if (bid >= 0 && t.node(bid).needs_grad) {
            double acc = 0.0;
            for (int l = 0; l < length; ++l) acc += g[l];
            t.node(bid).grad[static_cast<std::size_t>(co)] += acc;
          }
          for (int ci = 0; ci < c_in; ++ci) {
            const double* src = xn2.val.data() + (static_cast<std::int64_t>(nb) * c_in + ci) * length;
            const double* ker = wn2.val.data() + (static_cast<std::int64_t>(co) * c_in + ci) * width;
            double* gsrc = xn2.needs_grad
                               ? xn2.grad.data() + (static_cast<std::int64_t>(nb) * c_in + ci) * length
                               : nullptr;
            double* gker = wn2.needs_grad
                               ? wn2.grad.data() + (static_cast<std::int64_t>(co) * c_in + ci) * width
                               : nullptr;
            for (int t2 = 0; t2 < width; ++t2) {
              const int off = t2 - pad;
              const int lo = std::max(0, -off);
              const int hi = std::min(length, length - off);
              if (gker != nullptr) {
                double acc = 0.0;
                for (int l = lo; l < hi; ++l) acc += g[l] * src[l + off];
                gker[t2] += acc;
              }
              if (gsrc != nullptr) {
                const double kv = ker[t2];
                if (kv != 0.0) {
                  for (int l = lo; l < hi; ++l) gsrc[l + off] += kv * g[l];
                }
              }
            }
          }
        }
      }
    };
  }
  return {this, id};
}

Var Tape::softmax_last(Var x) {
  const Node& xn = node(x.id);
  if (xn.shape.empty()) throw std::invalid_argument("softmax_last: scalar input");
  const int m = xn.shape.back();
  const std::int64_t rows = numel(xn.shape) / m;
  int xid = x.id;
  return make_unary(
      x, xn.shape,
      [rows, m](const Node& in, Node& n) {
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* src = in.val.data() + r * m;
          double* dst = n.val.data() + r * m;
          double mx = src[0];
          for (int j = 1; j < m; ++j) mx = std::max(mx, src[j]);
          double acc = 0.0;
          for (int j = 0; j < m; ++j) {
            dst[j] = std::exp(src[j] - mx);
            acc += dst[j];
          }
          for (int j = 0; j < m; ++j) dst[j] /= acc;
        }
      },
      [xid, rows, m](Tape& t, Node& self) {
        Node& xn2 = t.node(xid);
        if (!xn2.needs_grad) return;
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* y = self.val.data() + r * m;
          const double* g = self.grad.data() + r * m;
          double dot = 0.0;
          for (int j = 0; j < m; ++j) dot += y[j] * g[j];
          double* gx = xn2.grad.data() + r * m;
          for (int j = 0; j < m; ++j) gx[j] += y[j] * (g[j] - dot);
        }
      });
}

Var Tape::layernorm(Var x, Var gamma, Var beta, double eps) {
  const Node& xn = node(x.id);
  if (xn.shape.empty()) throw std::invalid_argument("layernorm: scalar input");
  const int d = xn.shape.back();
  const std::int64_t rows = numel(xn.shape) / d;
  const Node& gn = node(gamma.id);
  const Node& bn = node(beta.id);
  if (gn.shape != Shape{d} || bn.shape != Shape{d}) {
    throw std::invalid_argument("layernorm: gamma/beta must have shape (d)");
  }

  bool needs = xn.needs_grad || gn.needs_grad || bn.needs_grad;
  int id = push(xn.shape, needs);
  Node& n = node(id);

  // Cache per-row inverse std and normalized values for the backward pass.
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  auto xhat = std::make_shared<std::vector<double>>(n.val.size());

  {
    const auto& xv = node(x.id).val;
    const auto& gv = node(gamma.id).val;
    const auto& bv = node(beta.id).val;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* src = xv.data() + r * d;
      double mu = 0.0;
      for (int j = 0; j < d; ++j) mu += src[j];
      mu /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
      var /= d;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(r)] = is;
      double* h = xhat->data() + r * d;
      double* dst = n.val.data() + r * d;
      for (int j = 0; j < d; ++j) {
        h[j] = (src[j] - mu) * is;
        dst[j] = gv[static_cast<std::size_t>(j)] * h[j] + bv[static_cast<std::size_t>(j)];
      }
    }
  }

  if (needs) {
    int xid = x.id;
    int gid = gamma.id;
    int bid = beta.id;
    n.back = [xid, gid, bid, rows, d, inv_std, xhat](Tape& t, Node& self) {
      Node& xn2 = t.node(xid);
      Node& gn2 = t.node(gid);
      Node& bn2 = t.node(bid);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* g = self.grad.data() + r * d;
        const double* h = xhat->data() + r * d;
        if (gn2.needs_grad || bn2.needs_grad) {
          for (int j = 0; j < d; ++j) {
            if (gn2.needs_grad) gn2.grad[static_cast<std::size_t>(j)] += g[j] * h[j];
            if (bn2.needs_grad) bn2.grad[static_cast<std::size_t>(j)] += g[j];
          }
        }
        if (xn2.needs_grad) {
          const double is = (*inv_std)[static_cast<std::size_t>(r)];
          double mean_dh = 0.0;
          double mean_dh_h = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dh = g[j] * gn2.val[static_cast<std::size_t>(j)];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
          }
          mean_dh /= d;
          mean_dh_h /= d;
          double* gx = xn2.grad.data() + r * d;
          for (int j = 0; j < d; ++j) {
            const double dh = g[j] * gn2.val[static_cast<std::size_t>(j)];
            gx[j] += is * (dh - mean_dh - h[j] * mean_dh_h);
          }
        }
      }
    };
  }
  return {this, id};
}

Var Tape::batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                    double eps, double momentum, bool train, bool update_stats) {
  const Node& xn = node(x.id);
  if (xn.shape.size() != 2) throw std::invalid_argument("batchnorm: expected (N, F) input");
  const int n_batch = xn.shape[0];
  const int f = xn.shape[1];
  if (train && n_batch < 2) {
    throw std::invalid_argument("batchnorm: train mode requires batch size >= 2");
  }
  const Node& gn = node(gamma.id);
  const Node& bn = node(beta.id);
  if (gn.shape != Shape{f} || bn.shape != Shape{f}) {
    throw std::invalid_argument("batchnorm: gamma/beta must have shape (F)");
  }

  bool needs = xn.needs_grad || gn.needs_grad || bn.needs_grad;
  int id = push(xn.shape, needs);
  Node& n = node(id);

  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(f), 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(f), 0.0);
  auto xhat = std::make_shared<std::vector<double>>(n.val.size());

  {
    const auto& xv = node(x.id).val;
    if (train) {
      for (int j = 0; j < f; ++j) {
        double mu = 0.0;
        for (int i = 0; i < n_batch; ++i) mu += xv[static_cast<std::size_t>(i) * f + j];
        mu /= n_batch;
        double var = 0.0;
        for (int i = 0; i < n_batch; ++i) {
          const double c = xv[static_cast<std::size_t>(i) * f + j] - mu;
          var += c * c;
        }
        const double var_biased = var / n_batch;
        (*mean)[static_cast<std::size_t>(j)] = mu;
        (*inv_std)[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(var_biased + eps);
        if (update_stats) {
          const double var_unbiased = var / (n_batch - 1);
          running_mean.v[static_cast<std::size_t>(j)] =
              momentum * running_mean.v[static_cast<std::size_t>(j)] + (1.0 - momentum) * mu;
          running_var.v[static_cast<std::size_t>(j)] =
              momentum * running_var.v[static_cast<std::size_t>(j)] +
              (1.0 - momentum) * var_unbiased;
        }
      }
    } else {
      for (int j = 0; j < f; ++j) {
        (*mean)[static_cast<std::size_t>(j)] = running_mean.v[static_cast<std::size_t>(j)];
        (*inv_std)[static_cast<std::size_t>(j)] =
            1.0 / std::sqrt(running_var.v[static_cast<std::size_t>(j)] + eps);
      }
    }
    const auto& gv = node(gamma.id).val;
    const auto& bv = node(beta.id).val;
    for (int i = 0; i < n_batch; ++i) {
      for (int j = 0; j < f; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * f + j;
        const double h = (xv[idx] - (*mean)[static_cast<std::size_t>(j)]) *
                         (*inv_std)[static_cast<std::size_t>(j)];
        (*xhat)[idx] = h;
        n.val[idx] = gv[static_cast<std::size_t>(j)] * h + bv[static_cast<std::size_t>(j)];
      }
    }
  }

  if (needs) {
    int xid = x.id;
    int gid = gamma.id;
    int bid = beta.id;
    n.back = [xid, gid, bid, n_batch, f, train, inv_std, xhat](Tape& t, Node& self) {
      Node& xn2 = t.node(xid);
      Node& gn2 = t.node(gid);
      Node& bn2 = t.node(bid);
      for (int j = 0; j < f; ++j) {
        double sum_g = 0.0;
        double sum_gh = 0.0;
        for (int i = 0; i < n_batch; ++i) {
          const std::size_t idx = static_cast<std::size_t>(i) * f + j;
          sum_g += self.grad[idx];
          sum_gh += self.grad[idx] * (*xhat)[idx];
        }
        if (gn2.needs_grad) gn2.grad[static_cast<std::size_t>(j)] += sum_gh;
        if (bn2.needs_grad) bn2.grad[static_cast<std::size_t>(j)] += sum_g;
        if (xn2.needs_grad) {
          const double gmm = gn2.val[static_cast<std::size_t>(j)];
          const double is = (*inv_std)[static_cast<std::size_t>(j)];
          if (train) {
            // Batch statistics participate in the graph.
            const double inv_n = 1.0 / n_batch;
            for (int i = 0; i < n_batch; ++i) {
              const std::size_t idx = static_cast<std::size_t>(i) * f + j;
              xn2.grad[idx] += gmm * is *
                               (self.grad[idx] - inv_n * sum_g - (*xhat)[idx] * inv_n * sum_gh);
            }
          } else {
            for (int i = 0; i < n_batch; ++i) {
              const std::size_t idx = static_cast<std::size_t>(i) * f + j;
              xn2.grad[idx] += gmm * is * self.grad[idx];
            }
          }
        }
      }
    };
  }
  return {this, id};
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("backward: root from another tape");
  Node& rn = node(root.id);
  if (numel(rn.shape) != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!rn.needs_grad) return;  // nothing reachable to differentiate

  for (auto& n : nodes_) {
    if (n.needs_grad) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }
  rn.grad[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = node(id);
    if (n.needs_grad && n.back) n.back(*this, n);
  }
}

}  // namespace efb::nn
