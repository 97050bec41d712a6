#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedtl/glm.hpp"
#include "fedtl/solver.hpp"

namespace fedtl {

// ---------------------------------------------------------------------------
// Messages and wire format
//
// header (40 bytes, little-endian):
//   magic "FTLM" | version u16 | msg_type u8 | site_id u32 | population_id u32
//   | p u32 | n_local u64 | anchor_digest u64 | 5 reserved zero bytes
// payload: float64 array, p entries for a gradient, p(p+1)/2 for a Hessian
// (lower triangle, row-major).

enum class MessageType : std::uint8_t { gradient = 1, hessian = 2 };

inline const char* to_string(MessageType t) { return t == MessageType::gradient ? "gradient" : "hessian"; }

inline constexpr std::size_t kHeaderBytes = 40;
inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr char kMagic[4] = {'F', 'T', 'L', 'M'};

/// One site's summary statistic for one population at one anchor.
struct SummaryMessage {
  MessageType type = MessageType::gradient;
  std::uint32_t site_id = 0;
  std::uint32_t population_id = 0;
  std::uint32_t p = 0;
  std::uint64_t n_local = 0;
  std::uint64_t anchor_digest = 0;
  std::vector<double> payload;

  bool operator==(const SummaryMessage&) const = default;
};

inline std::size_t payload_length(MessageType type, std::uint64_t p) {
  return type == MessageType::gradient ? p : p * (p + 1) / 2;
}

inline std::size_t encoded_size(MessageType type, std::uint64_t p) {
  return kHeaderBytes + 8 * payload_length(type, p);
}

/// FNV-1a over the little-endian float64 bytes of v.
inline std::uint64_t anchor_digest(const Vector& v) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index j = 0; j < v.size(); ++j) {
    const auto bits = std::bit_cast<std::uint64_t>(v(j));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline std::uint64_t fnv1a(std::span<const std::byte> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline void put_le(std::vector<std::byte>& out, std::uint64_t v, int width) {
  for (int b = 0; b < width; ++b) out.push_back(static_cast<std::byte>((v >> (8 * b)) & 0xffU));
}

inline std::uint64_t get_le(std::span<const std::byte> in, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int b = 0; b < width; ++b) v |= static_cast<std::uint64_t>(in[offset + static_cast<std::size_t>(b)]) << (8 * b);
  return v;
}

}  // namespace detail

inline std::vector<std::byte> encode_message(const SummaryMessage& msg) {
  detail::require(msg.payload.size() == payload_length(msg.type, msg.p), "payload length does not match p");
  std::vector<std::byte> out;
  out.reserve(encoded_size(msg.type, msg.p));
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  detail::put_le(out, kWireVersion, 2);
  detail::put_le(out, static_cast<std::uint8_t>(msg.type), 1);
  detail::put_le(out, msg.site_id, 4);
  detail::put_le(out, msg.population_id, 4);
  detail::put_le(out, msg.p, 4);
  detail::put_le(out, msg.n_local, 8);
  detail::put_le(out, msg.anchor_digest, 8);
  detail::put_le(out, 0, 5);
  for (double d : msg.payload) detail::put_le(out, std::bit_cast<std::uint64_t>(d), 8);
  return out;
}

/// Parses a header only; throws DecodeError naming the offending field.
inline SummaryMessage decode_header(std::span<const std::byte> bytes) {
  if (bytes.size() < kHeaderBytes)
    throw DecodeError("header", "need " + std::to_string(kHeaderBytes) + " bytes, got " + std::to_string(bytes.size()));
  for (std::size_t i = 0; i < 4; ++i)
    if (bytes[i] != static_cast<std::byte>(kMagic[i])) throw DecodeError("magic", "expected FTLM");
  const auto version = detail::get_le(bytes, 4, 2);
  if (version != kWireVersion) throw DecodeError("version", "unsupported version " + std::to_string(version));
  const auto type = detail::get_le(bytes, 6, 1);
  if (type != 1 && type != 2) throw DecodeError("msg_type", "unknown type " + std::to_string(type));
  SummaryMessage msg;
  msg.type = static_cast<MessageType>(type);
  msg.site_id = static_cast<std::uint32_t>(detail::get_le(bytes, 7, 4));
  msg.population_id = static_cast<std::uint32_t>(detail::get_le(bytes, 11, 4));
  msg.p = static_cast<std::uint32_t>(detail::get_le(bytes, 15, 4));
  msg.n_local = detail::get_le(bytes, 19, 8);
  msg.anchor_digest = detail::get_le(bytes, 27, 8);
  for (std::size_t i = 35; i < kHeaderBytes; ++i)
    if (bytes[i] != std::byte{0}) throw DecodeError("reserved", "reserved bytes must be zero");
  return msg;
}

inline SummaryMessage decode_message(std::span<const std::byte> bytes) {
  SummaryMessage msg = decode_header(bytes);
  const std::size_t len = payload_length(msg.type, msg.p);
  const std::size_t need = kHeaderBytes + 8 * len;
  if (bytes.size() < need)
    throw DecodeError("payload", "truncated: need " + std::to_string(need) + " bytes, got " + std::to_string(bytes.size()));
  if (bytes.size() > need)
    throw DecodeError("payload", "trailing bytes: expected " + std::to_string(need) + ", got " + std::to_string(bytes.size()));
  msg.payload.resize(len);
  for (std::size_t i = 0; i < len; ++i)
    msg.payload[i] = std::bit_cast<double>(detail::get_le(bytes, kHeaderBytes + 8 * i, 8));
  return msg;
}

inline std::vector<double> pack_lower(const Matrix& h) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(h.rows() * (h.rows() + 1) / 2));
  for (Index i = 0; i < h.rows(); ++i)
    for (Index j = 0; j <= i; ++j) out.push_back(h(i, j));
  return out;
}

inline Matrix unpack_lower(std::span<const double> packed, Index p) {
  detail::require(packed.size() == static_cast<std::size_t>(p * (p + 1) / 2), "packed Hessian has wrong length");
  Matrix h(p, p);
  std::size_t pos = 0;
  for (Index i = 0; i < p; ++i)
    for (Index j = 0; j <= i; ++j) {
      h(i, j) = packed[pos];
      h(j, i) = packed[pos];
      ++pos;
    }
  return h;
}

/// One JSON object per line describing message headers (payloads omitted).
inline void write_header_jsonl(std::ostream& os, const SummaryMessage& m, int round) {
  os << "{\"round\":" << round << ",\"type\":\"" << to_string(m.type) << "\",\"site_id\":" << m.site_id
     << ",\"population_id\":" << m.population_id << ",\"p\":" << m.p << ",\"n_local\":" << m.n_local
     << ",\"anchor_digest\":\"" << std::hex << m.anchor_digest << std::dec
     << "\",\"bytes\":" << encoded_size(m.type, m.p) << "}\n";
}

// ---------------------------------------------------------------------------
// Sites

using AnchorMap = std::map<int, Vector>;

/// A site and the rows it stores. Nothing outside the site reads `data`
/// during a federated round; only SummaryMessages leave.
struct SiteNode {
  int site_id = 1;
  PartitionedDataset data;  // every row has site_of == site_id
  GlmFamily family;

  std::set<int> populations() const {
    std::set<int> out;
    for (int k = 0; k < data.num_populations(); ++k)
      if (data.count(site_id, k) > 0) out.insert(k);
    return out;
  }
  Index count(int population) const { return data.count(site_id, population); }
};

/// Splits a dataset into one SiteNode per site id 1..M (empty sites included).
inline std::vector<SiteNode> split_by_site(const PartitionedDataset& data, const GlmFamily& family) {
  std::vector<SiteNode> out;
  for (int m = 1; m <= data.num_sites(); ++m) {
    const auto rows = data.site_rows(m);
    out.push_back({m, data.subset(rows), family});
  }
  return out;
}

/// Gradient (and optionally Hessian) messages for every nonempty local cell.
/// With `partial`, only populations that have an anchor are processed;
/// otherwise every held population must have one.
inline std::vector<SummaryMessage> site_compute(const SiteNode& site, const AnchorMap& anchors, bool want_hessian,
                                                bool partial = false) {
  std::vector<SummaryMessage> out;
  for (int k : site.populations()) {
    auto it = anchors.find(k);
    if (it == anchors.end()) {
      if (partial) continue;
      throw ContractViolation("site " + std::to_string(site.site_id) + ": no anchor for population " +
                              std::to_string(k));
    }
    const Vector& anchor = it->second;
    const auto rows = site.data.cell(site.site_id, k);
    SummaryMessage g;
    g.type = MessageType::gradient;
    g.site_id = static_cast<std::uint32_t>(site.site_id);
    g.population_id = static_cast<std::uint32_t>(k);
    g.p = static_cast<std::uint32_t>(site.data.dim());
    g.n_local = rows.size();
    g.anchor_digest = anchor_digest(anchor);
    const Vector grad = gradient(site.family, site.data, rows, anchor);
    g.payload.assign(grad.data(), grad.data() + grad.size());
    out.push_back(std::move(g));
    if (want_hessian) {
      SummaryMessage h = out.back();
      h.type = MessageType::hessian;
      h.payload = pack_lower(hessian(site.family, site.data, rows, anchor));
      out.push_back(std::move(h));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Surrogates

/// R(b; anchor) = 0.5 (b - anchor)' H (b - anchor) + <b - anchor, g>
struct QuadraticSurrogate {
  Vector anchor;
  Vector grad_combined;
  Matrix hessian_avg;
  Index n_total = 0;

  double value(const Vector& b) const {
    const Vector d = b - anchor;
    return 0.5 * d.dot(hessian_avg * d) + d.dot(grad_combined);
  }
  Vector gradient_at(const Vector& b) const { return hessian_avg * (b - anchor) + grad_combined; }

  /// The surrogate as a function of b evaluated at b + shift, i.e. the same
  /// quadratic re-anchored at anchor - shift.
  QuadraticSurrogate shifted(const Vector& shift) const {
    QuadraticSurrogate s = *this;
    s.anchor = anchor - shift;
    return s;
  }
};

/// sum_i weight_i * R_i(b) written as 0.5 b'Ab + l'b + c.
inline QuadraticObjective weighted_sum(std::span<const std::pair<double, QuadraticSurrogate>> terms) {
  detail::require(!terms.empty(), "weighted_sum needs at least one surrogate");
  const Index p = terms.front().second.anchor.size();
  QuadraticObjective q{Matrix::Zero(p, p), Vector::Zero(p), 0.0};
  for (const auto& [w, r] : terms) {
    const Vector ha = r.hessian_avg * r.anchor;
    q.a += w * r.hessian_avg;
    q.linear += w * (r.grad_combined - ha);
    q.constant += w * (0.5 * r.anchor.dot(ha) - r.anchor.dot(r.grad_combined));
  }
  return q;
}

inline QuadraticObjective as_objective(const QuadraticSurrogate& r) {
  const std::pair<double, QuadraticSurrogate> one{1.0, r};
  return weighted_sum(std::span(&one, 1));
}

/// Builds population k's surrogate from its messages. Gradient payloads are
/// summed and divided by the total n_local of gradient messages; Hessian
/// payloads are divided by the n_local of the messages that carried them
/// (all sites for the shared-Hessian algorithm, only the leading site for the
/// local-Hessian one). Summation runs in ascending site order, so the result
/// does not depend on message order.
inline QuadraticSurrogate combine_surrogate(std::span<const SummaryMessage> msgs, const Vector& anchor) {
  if (msgs.empty()) throw EmptyPopulationError("combine_surrogate: no messages");
  const auto digest = anchor_digest(anchor);
  const auto pop = msgs.front().population_id;
  const Index p = anchor.size();
  std::vector<const SummaryMessage*> grads, hess;
  for (const auto& m : msgs) {
    if (m.population_id != pop) throw ContractViolation("combine_surrogate: messages from several populations");
    if (m.p != static_cast<std::uint32_t>(p)) throw ContractViolation("combine_surrogate: dimension mismatch");
    if (m.anchor_digest != digest)
      throw StaleAnchorError("message from site " + std::to_string(m.site_id) + " was computed at a stale anchor");
    (m.type == MessageType::gradient ? grads : hess).push_back(&m);
  }
  auto by_site = [](const SummaryMessage* a, const SummaryMessage* b) { return a->site_id < b->site_id; };
  std::sort(grads.begin(), grads.end(), by_site);
  std::sort(hess.begin(), hess.end(), by_site);

  QuadraticSurrogate r;
  r.anchor = anchor;
  Vector gsum = Vector::Zero(p);
  std::uint64_t n = 0;
  for (const auto* m : grads) {
    gsum += Eigen::Map<const Vector>(m->payload.data(), p);
    n += m->n_local;
  }
  if (grads.empty() || n == 0) throw EmptyPopulationError("population " + std::to_string(pop) + " has no samples");
  Matrix hsum = Matrix::Zero(p, p);
  std::uint64_t nh = 0;
  for (const auto* m : hess) {
    hsum += unpack_lower(m->payload, p);
    nh += m->n_local;
  }
  r.n_total = static_cast<Index>(n);
  r.grad_combined = gsum / static_cast<double>(n);
  r.hessian_avg = nh > 0 ? Matrix(hsum / static_cast<double>(nh)) : Matrix::Zero(p, p);
  return r;
}

/// Pools surrogates that share an anchor into one, weighting by sample count.
inline QuadraticSurrogate merge_surrogates(std::span<const QuadraticSurrogate> parts) {
  detail::require(!parts.empty(), "merge_surrogates: nothing to merge");
  QuadraticSurrogate out = parts.front();
  const double n0 = static_cast<double>(out.n_total);
  out.grad_combined *= n0;
  out.hessian_avg *= n0;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    detail::require(parts[i].anchor == out.anchor, "merge_surrogates: anchors differ");
    const double n = static_cast<double>(parts[i].n_total);
    out.grad_combined += n * parts[i].grad_combined;
    out.hessian_avg += n * parts[i].hessian_avg;
    out.n_total += parts[i].n_total;
  }
  out.grad_combined /= static_cast<double>(out.n_total);
  out.hessian_avg /= static_cast<double>(out.n_total);
  return out;
}

// ---------------------------------------------------------------------------
// Communication ledger

struct LedgerEntry {
  int round = 0;
  int site_id = 0;
  int population_id = 0;
  MessageType type = MessageType::gradient;
  std::size_t header_bytes = 0;
  std::size_t payload_bytes = 0;
};

struct RoundSummary {
  int round = 0;
  std::size_t gradient_messages = 0;
  std::size_t hessian_messages = 0;
  std::size_t gradient_bytes = 0;  // header + payload
  std::size_t hessian_bytes = 0;
  std::size_t gradient_payload_bytes = 0;
  std::size_t hessian_payload_bytes = 0;

  std::size_t total_bytes() const { return gradient_bytes + hessian_bytes; }
};

class CommLedger {
 public:
  void record(int round, const SummaryMessage& m, std::size_t encoded_bytes) {
    entries_.push_back({round, static_cast<int>(m.site_id), static_cast<int>(m.population_id), m.type, kHeaderBytes,
                        encoded_bytes - kHeaderBytes});
  }
  const std::vector<LedgerEntry>& entries() const { return entries_; }

  std::size_t total_bytes() const {
    std::size_t s = 0;
    for (const auto& e : entries_) s += e.header_bytes + e.payload_bytes;
    return s;
  }

 private:
  std::vector<LedgerEntry> entries_;
};

/// Per-round totals by message type, rounds ascending.
inline std::vector<RoundSummary> ledger_report(const CommLedger& ledger) {
  std::map<int, RoundSummary> rounds;
  for (const auto& e : ledger.entries()) {
    auto& r = rounds[e.round];
    r.round = e.round;
    const std::size_t bytes = e.header_bytes + e.payload_bytes;
    if (e.type == MessageType::gradient) {
      ++r.gradient_messages;
      r.gradient_bytes += bytes;
      r.gradient_payload_bytes += e.payload_bytes;
    } else {
      ++r.hessian_messages;
      r.hessian_bytes += bytes;
      r.hessian_payload_bytes += e.payload_bytes;
    }
  }
  std::vector<RoundSummary> out;
  for (auto& [_, r] : rounds) out.push_back(r);
  return out;
}

inline RoundSummary ledger_totals(const CommLedger& ledger) {
  RoundSummary t;
  for (const auto& r : ledger_report(ledger)) {
    t.gradient_messages += r.gradient_messages;
    t.hessian_messages += r.hessian_messages;
    t.gradient_bytes += r.gradient_bytes;
    t.hessian_bytes += r.hessian_bytes;
    t.gradient_payload_bytes += r.gradient_payload_bytes;
    t.hessian_payload_bytes += r.hessian_payload_bytes;
  }
  return t;
}

// ---------------------------------------------------------------------------
// In-process transport

enum class HessianPolicy { none, all_sites, leading_site_only };

struct RoundRequest {
  AnchorMap anchors;
  HessianPolicy hessians = HessianPolicy::all_sites;
  int leading_site = 1;
  bool partial = false;  // only the anchored populations are requested
};

/// Runs synchronous rounds: anchors go out, every site answers with encoded
/// messages, each byte string is ledgered and decoded, and the decoded
/// messages are all the coordinator gets back.
class Federation {
 public:
  explicit Federation(std::shared_ptr<const std::vector<SiteNode>> sites, std::ostream* header_log = nullptr)
      : sites_(std::move(sites)), header_log_(header_log) {
    detail::require(sites_ && !sites_->empty(), "federation needs at least one site");
  }

  Federation(std::vector<SiteNode> sites, std::ostream* header_log = nullptr)
      : Federation(std::make_shared<const std::vector<SiteNode>>(std::move(sites)), header_log) {}

  /// Fresh session over the same sites with an empty ledger.
  Federation session(std::ostream* header_log = nullptr) const { return Federation(sites_, header_log); }

  int num_sites() const { return static_cast<int>(sites_->size()); }
  Index dim() const { return sites_->front().data.dim(); }
  const GlmFamily& family() const { return sites_->front().family; }
  std::vector<int> site_ids() const {
    std::vector<int> ids;
    for (const auto& s : *sites_) ids.push_back(s.site_id);
    return ids;
  }

  /// Local computation at one site (initialization, validation). Returns the
  /// site object itself; callers use it only for work done at that site.
  const SiteNode& site(int site_id) const {
    for (const auto& s : *sites_)
      if (s.site_id == site_id) return s;
    throw ContractViolation("no site with id " + std::to_string(site_id));
  }

  /// Cell counts are public metadata (they travel in every message header).
  Index count(int site_id, int population) const { return site(site_id).count(population); }
  Index population_count(int population) const {
    Index n = 0;
    for (const auto& s : *sites_) n += s.count(population);
    return n;
  }
  int num_populations() const {
    int k = 0;
    for (const auto& s : *sites_) k = std::max(k, s.data.num_populations());
    return k;
  }

  std::vector<SummaryMessage> exchange(const RoundRequest& req) {
    ++round_;
    std::vector<SummaryMessage> received;
    for (const auto& s : *sites_) {
      const bool want_h = req.hessians == HessianPolicy::all_sites ||
                          (req.hessians == HessianPolicy::leading_site_only && s.site_id == req.leading_site);
      for (const auto& m : site_compute(s, req.anchors, want_h, req.partial)) {
        const auto bytes = encode_message(m);
        // the leading site hosts the coordinator, so its local Hessians never cross the network
        const bool local = req.hessians == HessianPolicy::leading_site_only && m.type == MessageType::hessian;
        if (!local) ledger_.record(round_, m, bytes.size());
        received.push_back(decode_message(bytes));
        if (header_log_) write_header_jsonl(*header_log_, received.back(), round_);
      }
    }
    return received;
  }

  const CommLedger& ledger() const { return ledger_; }
  int rounds() const { return round_; }

 private:
  std::shared_ptr<const std::vector<SiteNode>> sites_;
  std::ostream* header_log_ = nullptr;
  CommLedger ledger_;
  int round_ = 0;
};

inline std::vector<SummaryMessage> messages_for(std::span<const SummaryMessage> msgs, int population) {
  std::vector<SummaryMessage> out;
  for (const auto& m : msgs)
    if (static_cast<int>(m.population_id) == population) out.push_back(m);
  return out;
}

}  // namespace fedtl
