#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lancer/error.hpp"

namespace lancer {

struct ItemRecord {
  std::string item_id;
  std::string title;
  std::string content;  // title, attributes, synopsis
};

/// Items in file order. Positions in `items()` are the dense item indices
/// used everywhere downstream; `item_id` is the opaque external key.
class ItemCatalog {
 public:
  ItemCatalog() = default;
  explicit ItemCatalog(std::vector<ItemRecord> items) {
    for (auto& it : items) add(std::move(it));
  }

  void add(ItemRecord rec) {
    if (rec.title.empty()) fail(ErrorKind::data, "item " + rec.item_id + " has an empty title");
    if (index_.count(rec.item_id)) fail(ErrorKind::data, "duplicate item id " + rec.item_id);
    if (rec.content.empty()) rec.content = rec.title;
    index_.emplace(rec.item_id, items_.size());
    items_.push_back(std::move(rec));
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<ItemRecord>& items() const { return items_; }
  const ItemRecord& operator[](std::size_t i) const { return items_.at(i); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) fail(ErrorKind::data, "unknown item id " + id);
    return it->second;
  }

 private:
  std::vector<ItemRecord> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace lancer
