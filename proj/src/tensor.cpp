#include "diffdt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

namespace diffdt {

namespace {

std::string shape_str(const TensorNode& t) {
  return "[" + std::to_string(t.rows) + "x" + std::to_string(t.cols) + "]";
}

void check_same_shape(const TensorNode& a, const TensorNode& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
  }
}

Tensor make_node(int rows, int cols, std::vector<Tensor> parents) {
  auto t = std::make_shared<TensorNode>();
  t->rows = rows;
  t->cols = cols;
  t->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  t->parents = std::move(parents);
  for (const auto& p : t->parents) {
    if (p->requires_grad) t->requires_grad = true;
  }
  return t;
}

double softplus_d(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double TensorNode::scalar() const {
  if (rows != 1 || cols != 1) {
    throw DimensionError("scalar() on tensor " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
  return value[0];
}

Tensor tensor(int rows, int cols, bool requires_grad) {
  auto t = make_node(rows, cols, {});
  t->requires_grad = requires_grad;
  return t;
}

Tensor tensor(int rows, int cols, const std::vector<double>& data, bool requires_grad) {
  if (data.size() != static_cast<std::size_t>(rows) * cols) {
    throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
  auto t = tensor(rows, cols, requires_grad);
  t->value = data;
  return t;
}

Tensor scalar_tensor(double v) { return tensor(1, 1, {v}); }

Tensor randn(int rows, int cols, Rng& rng, double scale, bool requires_grad) {
  auto t = tensor(rows, cols, requires_grad);
  for (auto& v : t->value) v = scale * rng.gauss();
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(*a, *b, "add");
  auto out = make_node(a->rows, a->cols, {a, b});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = a->value[i] + b->value[i];
  out->backward_fn = [a, b](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) {
      a->grad[i] += self.grad[i];
      b->grad[i] += self.grad[i];
    }
  };
  return out;
}

Tensor add_rows(const Tensor& m, const Tensor& row) {
  if (row->rows != 1 || row->cols != m->cols) {
    throw DimensionError("add_rows: " + shape_str(*m) + " vs " + shape_str(*row));
  }
  auto out = make_node(m->rows, m->cols, {m, row});
  for (int r = 0; r < m->rows; ++r)
    for (int c = 0; c < m->cols; ++c) out->at(r, c) = m->at(r, c) + row->value[c];
  out->backward_fn = [m, row](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r)
      for (int c = 0; c < self.cols; ++c) {
        m->gat(r, c) += self.gat(r, c);
        row->grad[c] += self.gat(r, c);
      }
  };
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(*a, *b, "sub");
  auto out = make_node(a->rows, a->cols, {a, b});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = a->value[i] - b->value[i];
  out->backward_fn = [a, b](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) {
      a->grad[i] += self.grad[i];
      b->grad[i] -= self.grad[i];
    }
  };
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(*a, *b, "mul");
  auto out = make_node(a->rows, a->cols, {a, b});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = a->value[i] * b->value[i];
  out->backward_fn = [a, b](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) {
      a->grad[i] += self.grad[i] * b->value[i];
      b->grad[i] += self.grad[i] * a->value[i];
    }
  };
  return out;
}

Tensor mul_rows(const Tensor& m, const Tensor& row) {
  if (row->rows != 1 || row->cols != m->cols) {
    throw DimensionError("mul_rows: " + shape_str(*m) + " vs " + shape_str(*row));
  }
  auto out = make_node(m->rows, m->cols, {m, row});
  for (int r = 0; r < m->rows; ++r)
    for (int c = 0; c < m->cols; ++c) out->at(r, c) = m->at(r, c) * row->value[c];
  out->backward_fn = [m, row](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r)
      for (int c = 0; c < self.cols; ++c) {
        m->gat(r, c) += self.gat(r, c) * row->value[c];
        row->grad[c] += self.gat(r, c) * m->at(r, c);
      }
  };
  return out;
}

Tensor scale(const Tensor& a, double s) {
  auto out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = a->value[i] * s;
  out->backward_fn = [a, s](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) a->grad[i] += self.grad[i] * s;
  };
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  auto out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = a->value[i] + s;
  out->backward_fn = [a](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) a->grad[i] += self.grad[i];
  };
  return out;
}

Tensor relu(const Tensor& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->numel(); ++i)
    out->value[i] = a->value[i] > 0 ? a->value[i] : 0.0;
  out->backward_fn = [a](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i)
      if (a->value[i] > 0) a->grad[i] += self.grad[i];
  };
  return out;
}

Tensor softplus(const Tensor& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = softplus_d(a->value[i]);
  out->backward_fn = [a](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i)
      a->grad[i] += self.grad[i] * sigmoid_d(a->value[i]);
  };
  return out;
}

Tensor sigmoid(const Tensor& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = sigmoid_d(a->value[i]);
  out->backward_fn = [a](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) {
      const double y = self.value[i];
      a->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  };
  return out;
}

Tensor exp_t(const Tensor& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = std::exp(a->value[i]);
  out->backward_fn = [a](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i)
      a->grad[i] += self.grad[i] * self.value[i];
  };
  return out;
}

Tensor log_t(const Tensor& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->value[i] = std::log(a->value[i]);
  out->backward_fn = [a](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i)
      a->grad[i] += self.grad[i] / a->value[i];
  };
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a->cols != b->rows) {
    throw DimensionError("matmul: " + shape_str(*a) + " vs " + shape_str(*b));
  }
  auto out = make_node(a->rows, b->cols, {a, b});
  const int m = a->rows, k = a->cols, n = b->cols;
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = a->at(i, p);
      if (av == 0.0) continue;
      const double* brow = &b->value[static_cast<std::size_t>(p) * n];
      double* orow = &out->value[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  out->backward_fn = [a, b](TensorNode& self) {
    const int m = a->rows, k = a->cols, n = b->cols;
    // dA += G * B^T
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        double acc = 0.0;
        const double* grow = &self.grad[static_cast<std::size_t>(i) * n];
        const double* brow = &b->value[static_cast<std::size_t>(p) * n];
        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
        a->gat(i, p) += acc;
      }
    // dB += A^T * G
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const double av = a->at(i, p);
        if (av == 0.0) continue;
        const double* grow = &self.grad[static_cast<std::size_t>(i) * n];
        double* brow = &b->grad[static_cast<std::size_t>(p) * n];
        for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
      }
  };
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a->cols != b->cols) {
    throw DimensionError("matmul_nt: " + shape_str(*a) + " vs " + shape_str(*b));
  }
  auto out = make_node(a->rows, b->rows, {a, b});
  const int m = a->rows, k = a->cols, n = b->rows;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = &a->value[static_cast<std::size_t>(i) * k];
      const double* brow = &b->value[static_cast<std::size_t>(j) * k];
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out->at(i, j) = acc;
    }
  out->backward_fn = [a, b](TensorNode& self) {
    const int m = a->rows, k = a->cols, n = b->rows;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const double g = self.gat(i, j);
        if (g == 0.0) continue;
        double* arow = &a->grad[static_cast<std::size_t>(i) * k];
        double* brow = &b->grad[static_cast<std::size_t>(j) * k];
        const double* av = &a->value[static_cast<std::size_t>(i) * k];
        const double* bv = &b->value[static_cast<std::size_t>(j) * k];
        for (int p = 0; p < k; ++p) {
          arow[p] += g * bv[p];
          brow[p] += g * av[p];
        }
      }
  };
  return out;
}

Tensor transpose(const Tensor& a) {
  auto out = make_node(a->cols, a->rows, {a});
  for (int r = 0; r < a->rows; ++r)
    for (int c = 0; c < a->cols; ++c) out->at(c, r) = a->at(r, c);
  out->backward_fn = [a](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r)
      for (int c = 0; c < self.cols; ++c) a->gat(c, r) += self.gat(r, c);
  };
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty list");
  int total = 0;
  for (const auto& p : parts) {
    if (p->rows != parts[0]->rows)
      throw DimensionError("concat_cols: row mismatch");
    total += p->cols;
  }
  auto out = make_node(parts[0]->rows, total, parts);
  int off = 0;
  for (const auto& p : parts) {
    for (int r = 0; r < p->rows; ++r)
      for (int c = 0; c < p->cols; ++c) out->at(r, off + c) = p->at(r, c);
    off += p->cols;
  }
  out->backward_fn = [parts](TensorNode& self) {
    int off = 0;
    for (const auto& p : parts) {
      for (int r = 0; r < p->rows; ++r)
        for (int c = 0; c < p->cols; ++c) p->gat(r, c) += self.gat(r, off + c);
      off += p->cols;
    }
  };
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: empty list");
  int total = 0;
  for (const auto& p : parts) {
    if (p->cols != parts[0]->cols)
      throw DimensionError("concat_rows: column mismatch");
    total += p->rows;
  }
  auto out = make_node(total, parts[0]->cols, parts);
  int off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.begin(), p->value.end(),
              out->value.begin() + static_cast<std::size_t>(off) * out->cols);
    off += p->rows;
  }
  out->backward_fn = [parts](TensorNode& self) {
    int off = 0;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < p->numel(); ++i)
        p->grad[i] += self.grad[static_cast<std::size_t>(off) * self.cols + i];
      off += p->rows;
    }
  };
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  if (start < 0 || len <= 0 || start + len > a->cols)
    throw RangeError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(*a));
  auto out = make_node(a->rows, len, {a});
  for (int r = 0; r < a->rows; ++r)
    for (int c = 0; c < len; ++c) out->at(r, c) = a->at(r, start + c);
  out->backward_fn = [a, start](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r)
      for (int c = 0; c < self.cols; ++c) a->gat(r, start + c) += self.gat(r, c);
  };
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  if (start < 0 || len <= 0 || start + len > a->rows)
    throw RangeError("slice_rows: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(*a));
  auto out = make_node(len, a->cols, {a});
  std::copy(a->value.begin() + static_cast<std::size_t>(start) * a->cols,
            a->value.begin() + static_cast<std::size_t>(start + len) * a->cols,
            out->value.begin());
  out->backward_fn = [a, start](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i)
      a->grad[static_cast<std::size_t>(start) * a->cols + i] += self.grad[i];
  };
  return out;
}

Tensor reshape(const Tensor& a, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != a->numel())
    throw DimensionError("reshape: element count mismatch");
  auto out = make_node(rows, cols, {a});
  out->value = a->value;
  out->backward_fn = [a](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) a->grad[i] += self.grad[i];
  };
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (int r = 0; r < a->rows; ++r) {
    double mx = a->at(r, 0);
    for (int c = 1; c < a->cols; ++c) mx = std::max(mx, a->at(r, c));
    double z = 0.0;
    for (int c = 0; c < a->cols; ++c) z += std::exp(a->at(r, c) - mx);
    for (int c = 0; c < a->cols; ++c) out->at(r, c) = std::exp(a->at(r, c) - mx) / z;
  }
  out->backward_fn = [a](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < self.cols; ++c) dot += self.gat(r, c) * self.at(r, c);
      for (int c = 0; c < self.cols; ++c)
        a->gat(r, c) += self.at(r, c) * (self.gat(r, c) - dot);
    }
  };
  return out;
}

Tensor log_softmax_rows(const Tensor& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (int r = 0; r < a->rows; ++r) {
    double mx = a->at(r, 0);
    for (int c = 1; c < a->cols; ++c) mx = std::max(mx, a->at(r, c));
    double z = 0.0;
    for (int c = 0; c < a->cols; ++c) z += std::exp(a->at(r, c) - mx);
    const double lz = mx + std::log(z);
    for (int c = 0; c < a->cols; ++c) out->at(r, c) = a->at(r, c) - lz;
  }
  out->backward_fn = [a](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r) {
      double gsum = 0.0;
      for (int c = 0; c < self.cols; ++c) gsum += self.gat(r, c);
      for (int c = 0; c < self.cols; ++c)
        a->gat(r, c) += self.gat(r, c) - std::exp(self.at(r, c)) * gsum;
    }
  };
  return out;
}

Tensor causal_softmax_rows(const Tensor& a) {
  if (a->rows != a->cols)
    throw DimensionError("causal_softmax_rows: square scores required, got " +
                         shape_str(*a));
  auto out = make_node(a->rows, a->cols, {a});
  for (int r = 0; r < a->rows; ++r) {
    double mx = a->at(r, 0);
    for (int c = 1; c <= r; ++c) mx = std::max(mx, a->at(r, c));
    double z = 0.0;
    for (int c = 0; c <= r; ++c) z += std::exp(a->at(r, c) - mx);
    for (int c = 0; c <= r; ++c) out->at(r, c) = std::exp(a->at(r, c) - mx) / z;
  }
  out->backward_fn = [a](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c <= r; ++c) dot += self.gat(r, c) * self.at(r, c);
      for (int c = 0; c <= r; ++c)
        a->gat(r, c) += self.at(r, c) * (self.gat(r, c) - dot);
    }
  };
  return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  if (gain->rows != 1 || gain->cols != a->cols || bias->rows != 1 || bias->cols != a->cols)
    throw DimensionError("layer_norm: parameter shape mismatch with " + shape_str(*a));
  constexpr double kEps = 1e-5;
  auto out = make_node(a->rows, a->cols, {a, gain, bias});
  const int n = a->cols;
  for (int r = 0; r < a->rows; ++r) {
    double mean = 0.0;
    for (int c = 0; c < n; ++c) mean += a->at(r, c);
    mean /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) {
      const double d = a->at(r, c) - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (int c = 0; c < n; ++c)
      out->at(r, c) = (a->at(r, c) - mean) * inv * gain->value[c] + bias->value[c];
  }
  out->backward_fn = [a, gain, bias](TensorNode& self) {
    constexpr double kEps = 1e-5;
    const int n = a->cols;
    for (int r = 0; r < a->rows; ++r) {
      double mean = 0.0;
      for (int c = 0; c < n; ++c) mean += a->at(r, c);
      mean /= n;
      double var = 0.0;
      for (int c = 0; c < n; ++c) {
        const double d = a->at(r, c) - mean;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + kEps);
      double sum_gx = 0.0, sum_gxh = 0.0;
      for (int c = 0; c < n; ++c) {
        const double xh = (a->at(r, c) - mean) * inv;
        const double gg = self.gat(r, c) * gain->value[c];
        sum_gx += gg;
        sum_gxh += gg * xh;
        gain->grad[c] += self.gat(r, c) * xh;
        bias->grad[c] += self.gat(r, c);
      }
      for (int c = 0; c < n; ++c) {
        const double xh = (a->at(r, c) - mean) * inv;
        const double gg = self.gat(r, c) * gain->value[c];
        a->gat(r, c) += inv * (gg - sum_gx / n - xh * sum_gxh / n);
      }
    }
  };
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices) {
  for (int idx : indices) {
    if (idx < 0 || idx >= table->rows)
      throw VocabError("embedding_lookup: index " + std::to_string(idx) +
                       " out of range [0," + std::to_string(table->rows) + ")");
  }
  auto out = make_node(static_cast<int>(indices.size()), table->cols, {table});
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (int c = 0; c < table->cols; ++c)
      out->at(static_cast<int>(r), c) = table->at(indices[r], c);
  out->backward_fn = [table, indices](TensorNode& self) {
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (int c = 0; c < self.cols; ++c)
        table->gat(indices[r], c) += self.gat(static_cast<int>(r), c);
  };
  return out;
}

Tensor gather_cols(const Tensor& a, const std::vector<int>& col_per_row) {
  if (static_cast<int>(col_per_row.size()) != a->rows)
    throw DimensionError("gather_cols: need one column index per row");
  for (int c : col_per_row)
    if (c < 0 || c >= a->cols) throw RangeError("gather_cols: column out of range");
  auto out = make_node(a->rows, 1, {a});
  for (int r = 0; r < a->rows; ++r) out->value[r] = a->at(r, col_per_row[r]);
  out->backward_fn = [a, col_per_row](TensorNode& self) {
    for (int r = 0; r < self.rows; ++r) a->gat(r, col_per_row[r]) += self.grad[r];
  };
  return out;
}

Tensor mean_all(const Tensor& a) {
  auto out = make_node(1, 1, {a});
  double acc = 0.0;
  for (double v : a->value) acc += v;
  out->value[0] = acc / static_cast<double>(a->numel());
  out->backward_fn = [a](TensorNode& self) {
    const double g = self.grad[0] / static_cast<double>(a->numel());
    for (auto& gv : a->grad) gv += g;
  };
  return out;
}

Tensor sum_all(const Tensor& a) {
  auto out = make_node(1, 1, {a});
  double acc = 0.0;
  for (double v : a->value) acc += v;
  out->value[0] = acc;
  out->backward_fn = [a](TensorNode& self) {
    for (auto& gv : a->grad) gv += self.grad[0];
  };
  return out;
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  check_same_shape(*a, *b, "mse_loss");
  auto out = make_node(1, 1, {a, b});
  double acc = 0.0;
  for (std::size_t i = 0; i < a->numel(); ++i) {
    const double d = a->value[i] - b->value[i];
    acc += d * d;
  }
  out->value[0] = acc / static_cast<double>(a->numel());
  out->backward_fn = [a, b](TensorNode& self) {
    const double g = 2.0 * self.grad[0] / static_cast<double>(a->numel());
    for (std::size_t i = 0; i < a->numel(); ++i) {
      const double d = a->value[i] - b->value[i];
      a->grad[i] += g * d;
      b->grad[i] -= g * d;
    }
  };
  return out;
}

Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets) {
  if (static_cast<int>(targets.size()) != logits->rows)
    throw DimensionError("cross_entropy_with_logits: one target per row required");
  auto lsm = log_softmax_rows(logits);
  auto picked = gather_cols(lsm, targets);
  return scale(mean_all(picked), -1.0);
}

Tensor detach(const Tensor& a) {
  auto out = std::make_shared<TensorNode>();
  out->rows = a->rows;
  out->cols = a->cols;
  out->value = a->value;
  return out;
}

Tensor straight_through(const Tensor& pre, const Tensor& post) {
  check_same_shape(*pre, *post, "straight_through");
  auto out = make_node(pre->rows, pre->cols, {pre});
  out->value = post->value;
  out->backward_fn = [pre](TensorNode& self) {
    for (std::size_t i = 0; i < self.numel(); ++i) pre->grad[i] += self.grad[i];
  };
  return out;
}

Tensor cholesky_assemble(const Tensor& packed, int n) {
  const int need = n * (n + 1) / 2;
  if (packed->rows != 1 || packed->cols != need)
    throw DimensionError("cholesky_assemble: need [1x" + std::to_string(need) +
                         "] packed lower triangle, got " + shape_str(*packed));
  auto out = make_node(n, n, {packed});
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j, ++k) {
      out->at(i, j) = (i == j) ? softplus_d(packed->value[k]) : packed->value[k];
    }
  out->backward_fn = [packed, n](TensorNode& self) {
    int k = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j, ++k) {
        if (i == j)
          packed->grad[k] += self.gat(i, j) * sigmoid_d(packed->value[k]);
        else
          packed->grad[k] += self.gat(i, j);
      }
  };
  return out;
}

void backward(const Tensor& loss) {
  if (loss->rows != 1 || loss->cols != 1)
    throw DimensionError("backward: loss must be scalar, got " + shape_str(*loss));
  // Topological order via iterative DFS.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    Tensor node;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({loss, 0});
  visited.insert(loss.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      Tensor p = f.node->parents[f.next++];
      if (!visited.count(p.get())) {
        visited.insert(p.get());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node.get());
      stack.pop_back();
    }
  }
  for (TensorNode* n : order) n->grad.assign(n->numel(), 0.0);
  loss->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------

Tensor ParamStore::create(const std::string& name, int rows, int cols, Rng& rng,
                          double scale) {
  if (params_.count(name)) throw StateError("parameter already exists: " + name);
  auto t = randn(rows, cols, rng, scale, true);
  params_[name] = t;
  return t;
}

Tensor ParamStore::create_zero(const std::string& name, int rows, int cols) {
  if (params_.count(name)) throw StateError("parameter already exists: " + name);
  auto t = tensor(rows, cols, true);
  params_[name] = t;
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw NotFoundError("no such parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : params_) t->grad.assign(t->numel(), 0.0);
}

void Adam::step(ParamStore& store) {
  ++t_;
  for (auto& [name, p] : store.all()) {
    if (p->grad.size() != p->numel()) continue;  // untouched this step
    auto& slot = slots_[name];
    if (slot.m.empty()) {
      slot.m.assign(p->numel(), 0.0);
      slot.v.assign(p->numel(), 0.0);
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const double g = p->grad[i];
      if (std::isnan(g))
        throw TrainError("NaN gradient in parameter " + name);
      slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
      slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = slot.m[i] / bc1;
      const double vh = slot.v[i] / bc2;
      p->value[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw DataError("checkpoint: truncated header");
  return v;
}

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& vocab_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write("DDCK", 4);
  write_u32(os, kCheckpointVersion);
  write_u32(os, static_cast<std::uint32_t>(vocab_hash.size()));
  os.write(vocab_hash.data(), static_cast<std::streamsize>(vocab_hash.size()));
  write_u32(os, static_cast<std::uint32_t>(store.all().size()));
  for (const auto& [name, t] : store.all()) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t->rows));
    write_u32(os, static_cast<std::uint32_t>(t->cols));
    std::vector<float> buf(t->numel());
    for (std::size_t i = 0; i < t->numel(); ++i) buf[i] = static_cast<float>(t->value[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw DataError("checkpoint write failed: " + path);
}

namespace {

std::string load_checkpoint_impl(const std::string& path, ParamStore& store,
                                 bool create_params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DDCK", 4) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t hlen = read_u32(is);
  std::string hash(hlen, '\0');
  is.read(hash.data(), hlen);
  const std::uint32_t count = read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = read_u32(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const int rows = static_cast<int>(read_u32(is));
    const int cols = static_cast<int>(read_u32(is));
    std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw DataError("checkpoint: truncated array " + name);
    Tensor t;
    if (create_params) {
      t = store.create_zero(name, rows, cols);
    } else {
      t = store.get(name);
      if (t->rows != rows || t->cols != cols)
        throw DimensionError("checkpoint: shape mismatch for " + name);
    }
    for (std::size_t j = 0; j < buf.size(); ++j) t->value[j] = buf[j];
  }
  return hash;
}

}  // namespace

std::string load_checkpoint(const std::string& path, ParamStore& store) {
  return load_checkpoint_impl(path, store, false);
}

std::string load_checkpoint_into_new(const std::string& path, ParamStore& store) {
  return load_checkpoint_impl(path, store, true);
}

}  // namespace diffdt
