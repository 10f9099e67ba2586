// Shared text fixtures for the unit and acceptance tests.
#pragma once

#include <string>
#include <vector>

namespace fixture {

// Short French sentences with accents, punctuation and digits; enough
// distinct pairs to learn well over 100 merges.
inline const std::vector<std::string>& french_corpus() {
  static const std::vector<std::string> c = {
      "Le chat est sur la table. Le chien dort sous la table.",
      "Les enfants jouent dans le jardin, et le soleil brille.",
      "La table est belle; le chat aime la table et le jardin.",
      "Un caf\xC3\xA9 cr\xC3\xA8me, s'il vous pla\xC3\xAEt ! 42 euros ? Non, 4,20 euros.",
      "Mod\xC3\xA8les de langue fran\xC3\xA7" "ais entra\xC3\xAEn\xC3\xA9s sur un grand corpus de textes.",
      "Quelle est la capitale de la France ? Paris, bien s\xC3\xBBr, depuis tr\xC3\xA8s longtemps.",
      "Nous mangeons des pommes, des poires et des abricots pendant tout le mois de juillet.",
      "Vingt-trois kilom\xC3\xA8tres s\xC3\xA9parent la gare du village voisin; quelle promenade !",
  };
  return c;
}

}  // namespace fixture
