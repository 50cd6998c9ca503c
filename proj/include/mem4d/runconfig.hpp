#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mem4d/trainer.hpp"

namespace mem4d::cli {

/// Flat, namespaced key=value configuration. Every key has a default and a
/// type; values are validated when set. Precedence, lowest first: defaults,
/// config file, MEM4D_* environment, command-line flags.
class RunConfig {
 public:
  enum class Type { kUnsigned, kReal, kBool, kString };
  struct Key {
    std::string name;
    Type type;
    std::string value;
    std::string help;
  };

  RunConfig();

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  /// Throws ConfigError for unknown keys and unparsable values.
  void set(const std::string& key, const std::string& value);
  /// "key=value" as given to --set.
  void set_assignment(const std::string& assignment);
  /// Lines of key=value; '#' starts a comment; blank lines ignored.
  void load_file(const std::filesystem::path& path);
  /// Applies every MEM4D_<KEY> variable, where KEY is the upper-cased key with
  /// '.' replaced by '_'. Unknown MEM4D_ variables are rejected.
  void apply_environment(const std::map<std::string, std::string>& env);
  static std::map<std::string, std::string> process_environment();
  static std::string env_name(const std::string& key);

  const std::string& str(const std::string& key) const;
  std::size_t uns(const std::string& key) const;
  Real real(const std::string& key) const;
  bool flag(const std::string& key) const;

  /// Sorted key=value lines; load_file of this text reproduces the config.
  std::string dump() const;
  void echo_to(const std::filesystem::path& dir) const;  // writes <dir>/config.resolved

  std::vector<std::string> keys() const;
  const std::vector<Key>& schema() const { return schema_; }

  pipeline::ModelConfig model() const;
  pipeline::Wiring wiring() const;
  pipeline::TrainConfig train() const;
  scene::SceneConfig scene() const;
  eval::EvalOptions evaluation() const;
  std::vector<std::string> variants() const;

 private:
  const Key& key(const std::string& name) const;
  std::vector<Key> schema_;
  std::map<std::string, std::string> values_;
};

}  // namespace mem4d::cli
