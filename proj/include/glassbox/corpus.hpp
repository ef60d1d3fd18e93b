#pragma once

// Synthetic training corpus: country-capital facts, sequence completions,
// English->German word translations and instruction-style prompts for the 18
// function categories, each followed by its answer.

#include "glassbox/core.hpp"
#include "json.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace glassbox::corpus {

struct Filler {
  std::string slot;
  std::string answer;
};

struct TemplateGroup {
  std::vector<std::string> templates;  // "{X}" marks the slot
  std::vector<Filler> fillers;
};

struct CategorySpec {
  std::string type;
  std::string name;
  std::vector<Filler> reference_prompts;  // fixed prompts with their answers
  std::vector<TemplateGroup> groups;
};

inline std::string fill(const std::string& tmpl, const std::string& slot) {
  std::string out = tmpl;
  const auto pos = out.find("{X}");
  if (pos != std::string::npos) out.replace(pos, 3, slot);
  return out;
}

inline const std::vector<std::pair<std::string, std::string>>& capitals() {
  static const std::vector<std::pair<std::string, std::string>> kCapitals = {
      {"France", "Paris"},     {"Japan", "Tokyo"},        {"Germany", "Berlin"},
      {"Italy", "Rome"},       {"Spain", "Madrid"},       {"China", "Beijing"},
      {"Russia", "Moscow"},    {"Egypt", "Cairo"},        {"Canada", "Ottawa"},
      {"Peru", "Lima"},        {"Kenya", "Nairobi"},      {"Greece", "Athens"},
      {"Norway", "Oslo"},      {"Sweden", "Stockholm"},   {"Poland", "Warsaw"},
      {"Austria", "Vienna"},   {"Portugal", "Lisbon"},    {"Ireland", "Dublin"},
      {"Cuba", "Havana"},      {"Chile", "Santiago"},     {"Thailand", "Bangkok"},
      {"Turkey", "Ankara"},    {"Iran", "Tehran"},        {"Hungary", "Budapest"},
      {"Denmark", "Copenhagen"}, {"Finland", "Helsinki"}, {"Belgium", "Brussels"},
      {"Australia", "Canberra"}, {"Vietnam", "Hanoi"},    {"Korea", "Seoul"},
  };
  return kCapitals;
}

inline const std::vector<std::pair<std::string, std::string>>& german_words() {
  static const std::vector<std::pair<std::string, std::string>> kWords = {
      {"hello", "hallo"}, {"world", "Welt"},   {"dog", "Hund"},     {"cat", "Katze"},
      {"house", "Haus"},  {"water", "Wasser"}, {"bread", "Brot"},   {"tree", "Baum"},
      {"book", "Buch"},   {"friend", "Freund"}, {"night", "Nacht"}, {"day", "Tag"},
      {"sun", "Sonne"},   {"moon", "Mond"},    {"apple", "Apfel"},  {"milk", "Milch"},
      {"car", "Auto"},    {"school", "Schule"}, {"city", "Stadt"},  {"child", "Kind"},
  };
  return kWords;
}

inline std::vector<Filler> capital_fillers() {
  std::vector<Filler> out;
  for (const auto& [country, city] : capitals()) out.push_back({country, city});
  return out;
}

inline std::vector<Filler> german_fillers() {
  std::vector<Filler> out;
  for (const auto& [en, de] : german_words()) out.push_back({en, de});
  return out;
}

inline std::vector<Filler> successor_fillers(const std::vector<std::string>& cycle) {
  std::vector<Filler> out;
  for (std::size_t i = 0; i < cycle.size(); ++i) out.push_back({cycle[i], cycle[(i + 1) % cycle.size()]});
  return out;
}

inline const std::vector<std::string>& weekdays() {
  static const std::vector<std::string> k = {"Monday", "Tuesday", "Wednesday", "Thursday",
                                             "Friday", "Saturday", "Sunday"};
  return k;
}

inline const std::vector<std::string>& months() {
  static const std::vector<std::string> k = {"January", "February", "March",     "April",
                                             "May",     "June",     "July",      "August",
                                             "September", "October", "November", "December"};
  return k;
}

inline std::vector<Filler> number_fillers(int lo, int hi) {
  std::vector<Filler> out;
  for (int n = lo; n <= hi; ++n) out.push_back({std::to_string(n), std::to_string(n + 1)});
  return out;
}

// The 18 categories across 6 function types; the first two reference prompts
// of each category are its canonical examples.
inline const std::vector<CategorySpec>& categories() {
  static const std::vector<CategorySpec> kCategories = [] {
    std::vector<CategorySpec> c;
    // Abstractive tasks
    c.push_back({"abstractive_tasks",
                 "country_capital",
                 {{"The capital of France is", "Paris"},
                  {"What city serves as the capital of Japan?", "Tokyo"}},
                 {{{"The capital of {X} is", "What city serves as the capital of {X} ?",
                    "the capital of {X} is"},
                   capital_fillers()}}});
    c.push_back({"abstractive_tasks",
                 "translation_german",
                 {{"Translating 'hello' into German gives", "hallo"},
                  {"What would a German speaker say for 'world'?", "Welt"}},
                 {{{"Translating '{X}' into German gives", "What would a German speaker say for '{X}' ?",
                    "the German word for {X} is"},
                   german_fillers()}}});
    {
      auto numbers = number_fillers(1, 30);
      c.push_back({"abstractive_tasks",
                   "next_item",
                   {{"After 'Monday' comes", "Tuesday"}, {"The number following 5 is", "6"}},
                   {{{"After '{X}' comes", "After {X} comes", "The day after {X} is"},
                     successor_fillers(weekdays())},
                    {{"After '{X}' comes", "After {X} comes", "The month after {X} is"},
                     successor_fillers(months())},
                    {{"The number following {X} is", "After {X} comes"}, numbers}}});
    }
    // Multiple-choice QA
    c.push_back({"multiple_choice_qa",
                 "commonsense_qa",
                 {{"What happens when you mix red and blue?", "purple"},
                  {"Why do people wear coats in winter?", "warmth"}},
                 {{{"What happens when you mix {X} ?", "What color do you get when you mix {X} ?"},
                   {{"red and blue", "purple"},
                    {"red and yellow", "orange"},
                    {"blue and yellow", "green"},
                    {"black and white", "gray"},
                    {"red and white", "pink"},
                    {"blue and white", "light blue"},
                    {"yellow and green", "lime"}}},
                  {{"Why do people wear {X} in winter ?", "Why do people need {X} in winter ?"},
                   {{"coats", "warmth"},
                    {"gloves", "warmth"},
                    {"hats", "warmth"},
                    {"scarves", "warmth"},
                    {"boots", "warmth"},
                    {"sweaters", "warmth"}}}}});
    c.push_back({"multiple_choice_qa",
                 "math_qa",
                 {{"What is 15 multiplied by 8?", "120"},
                  {"Calculate the area of a square with side 5", "25"}},
                 {{{"What is {X} ?", "Calculate {X}"},
                   {{"15 multiplied by 8", "120"},
                    {"6 multiplied by 7", "42"},
                    {"9 multiplied by 3", "27"},
                    {"4 multiplied by 12", "48"},
                    {"11 multiplied by 5", "55"},
                    {"8 multiplied by 8", "64"},
                    {"7 multiplied by 9", "63"},
                    {"3 multiplied by 13", "39"}}},
                  {{"Calculate the area of a square with side {X}", "What is the area of a square with side {X} ?"},
                   {{"5", "25"}, {"3", "9"}, {"4", "16"}, {"6", "36"}, {"7", "49"}, {"9", "81"}}}}});
    c.push_back({"multiple_choice_qa",
                 "geography_qa",
                 {{"Which is the largest ocean?", "Pacific"},
                  {"What is the longest river in the world?", "Nile"}},
                 {{{"Which is the largest {X} ?", "What is the largest {X} on Earth ?"},
                   {{"ocean", "Pacific"},
                    {"desert", "Sahara"},
                    {"continent", "Asia"},
                    {"island", "Greenland"},
                    {"lake", "Caspian"},
                    {"rainforest", "Amazon"}}},
                  {{"What is the longest river in {X} ?", "Which river is the longest in {X} ?"},
                   {{"the world", "Nile"},
                    {"Europe", "Volga"},
                    {"Asia", "Yangtze"},
                    {"America", "Mississippi"},
                    {"Africa", "Nile"}}}}});
    // Text classification
    c.push_back({"text_classification",
                 "sentiment_analysis",
                 {{"Is this text positive or negative?", "positive"},
                  {"What emotion does this express?", "joy"}},
                 {{{"' {X} ' Is this text positive or negative ?", "' {X} ' What emotion does this express ?"},
                   {{"I love this movie", "positive"},
                    {"this food is terrible", "negative"},
                    {"what a wonderful day", "positive"},
                    {"I am so angry right now", "negative"},
                    {"the service was awful", "negative"},
                    {"we had a great time", "positive"},
                    {"this is the worst game", "negative"},
                    {"I feel happy today", "positive"}}}}});
    c.push_back({"text_classification",
                 "language_detection",
                 {{"What language is this text written in?", "English"},
                  {"Identify the language of this sentence", "English"}},
                 {{{"' {X} ' What language is this text written in ?", "' {X} ' Identify the language of this sentence"},
                   {{"bonjour le monde", "French"},
                    {"hallo Welt", "German"},
                    {"hola amigo", "Spanish"},
                    {"ciao bella", "Italian"},
                    {"good morning", "English"},
                    {"guten Tag", "German"},
                    {"merci beaucoup", "French"},
                    {"gracias senor", "Spanish"},
                    {"grazie mille", "Italian"},
                    {"thank you", "English"}}}}});
    c.push_back({"text_classification",
                 "spam_detection",
                 {{"Is this message spam?", "no"},
                  {"Classify this email as spam or legitimate", "legitimate"}},
                 {{{"' {X} ' Is this message spam ?", "' {X} ' Classify this email as spam or legitimate"},
                   {{"win a free prize now", "spam"},
                    {"meeting moved to noon", "legitimate"},
                    {"claim your cash reward", "spam"},
                    {"see you at dinner", "legitimate"},
                    {"cheap pills click here", "spam"},
                    {"the report is attached", "legitimate"},
                    {"you won a lottery", "spam"},
                    {"lunch tomorrow at one", "legitimate"}}}}});
    // Extractive tasks
    c.push_back({"extractive_tasks",
                 "adjective_vs_verb",
                 {{"Is 'running' an adjective or verb?", "verb"},
                  {"Classify 'beautiful' as adjective or verb", "adjective"}},
                 {{{"Is '{X}' an adjective or verb ?", "Classify '{X}' as adjective or verb"},
                   {{"running", "verb"},
                    {"beautiful", "adjective"},
                    {"happy", "adjective"},
                    {"jump", "verb"},
                    {"swim", "verb"},
                    {"tall", "adjective"},
                    {"write", "verb"},
                    {"quick", "adjective"},
                    {"sing", "verb"},
                    {"bright", "adjective"}}}}});
    c.push_back({"extractive_tasks",
                 "living_vs_nonliving",
                 {{"Is 'tree' living or non-living?", "living"},
                  {"Classify 'car' as living or non-living", "non-living"}},
                 {{{"Is '{X}' living or non-living ?", "Classify '{X}' as living or non-living"},
                   {{"tree", "living"},
                    {"car", "non-living"},
                    {"dog", "living"},
                    {"rock", "non-living"},
                    {"bird", "living"},
                    {"chair", "non-living"},
                    {"fish", "living"},
                    {"phone", "non-living"},
                    {"flower", "living"},
                    {"spoon", "non-living"}}}}});
    c.push_back({"extractive_tasks",
                 "concrete_vs_abstract",
                 {{"Is 'happiness' concrete or abstract?", "abstract"},
                  {"Classify 'table' as concrete or abstract", "concrete"}},
                 {{{"Is '{X}' concrete or abstract ?", "Classify '{X}' as concrete or abstract"},
                   {{"happiness", "abstract"},
                    {"table", "concrete"},
                    {"freedom", "abstract"},
                    {"hammer", "concrete"},
                    {"justice", "abstract"},
                    {"window", "concrete"},
                    {"courage", "abstract"},
                    {"bottle", "concrete"},
                    {"truth", "abstract"},
                    {"pencil", "concrete"}}}}});
    // Named entity recognition
    c.push_back({"named_entity_recognition",
                 "ner_person",
                 {{"Identify the person name in this text", "Alice"},
                  {"Extract all person names mentioned", "Alice"}},
                 {{{"' {X} ' Identify the person name in this text", "' {X} ' Extract all person names mentioned"},
                   {{"Alice went to the market", "Alice"},
                    {"yesterday Bob called me", "Bob"},
                    {"Maria wrote a letter", "Maria"},
                    {"the book was written by John", "John"},
                    {"Peter likes football", "Peter"},
                    {"Anna visited the museum", "Anna"},
                    {"we met Thomas at school", "Thomas"},
                    {"Laura plays the piano", "Laura"},
                    {"David bought a bike", "David"},
                    {"Sarah reads every night", "Sarah"}}}}});
    c.push_back({"named_entity_recognition",
                 "ner_location",
                 {{"What location is mentioned here?", "London"},
                  {"Extract all place names from the text", "London"}},
                 {{{"' {X} ' What location is mentioned here ?", "' {X} ' Extract all place names from the text"},
                   {{"we flew to London last week", "London"},
                    {"the train arrived in Paris", "Paris"},
                    {"she lives in Berlin", "Berlin"},
                    {"they hiked in the Alps", "Alps"},
                    {"he was born in Madrid", "Madrid"},
                    {"the ship sailed to Lisbon", "Lisbon"},
                    {"my uncle works in Tokyo", "Tokyo"},
                    {"we camped near Oslo", "Oslo"},
                    {"the conference is in Vienna", "Vienna"},
                    {"she studied in Rome", "Rome"}}}}});
    c.push_back({"named_entity_recognition",
                 "ner_organization",
                 {{"Find the organization name", "Google"},
                  {"Extract company or institution names", "Google"}},
                 {{{"' {X} ' Find the organization name", "' {X} ' Extract company or institution names"},
                   {{"she works at Google", "Google"},
                    {"he studied at Harvard", "Harvard"},
                    {"the report came from UNESCO", "UNESCO"},
                    {"Microsoft released a new product", "Microsoft"},
                    {"he joined Siemens last year", "Siemens"},
                    {"Amazon hired new staff", "Amazon"},
                    {"they donated to Oxfam", "Oxfam"},
                    {"the deal with Toyota failed", "Toyota"},
                    {"NASA launched a rocket", "NASA"},
                    {"she interned at Nokia", "Nokia"}}}}});
    // Text generation
    c.push_back({"text_generation",
                 "complete_sentence",
                 {{"Complete this sentence: \"The weather today is\"", "sunny"},
                  {"Finish the thought: \"In the future, we will\"", "travel"}},
                 {{{"Complete this sentence : \" {X} \"", "Finish the thought : \" {X} \""},
                   {{"The weather today is", "sunny"},
                    {"In the future , we will", "travel"},
                    {"My favorite food is", "pizza"},
                    {"Every morning I drink", "coffee"},
                    {"The sky at night is", "dark"},
                    {"On weekends we like to", "relax"},
                    {"The best way to learn is", "practice"},
                    {"After work I usually", "rest"}}}}});
    c.push_back({"text_generation",
                 "continue_story",
                 {{"Continue the story: \"Once upon a time...\"", "there lived a king"},
                  {"What happens next in this story?", "the hero returns home"}},
                 {{{"Continue the story : \" {X} \"", "\" {X} \" What happens next in this story ?"},
                   {{"Once upon a time ...", "there lived a king"},
                    {"The dragon flew over the village", "and the people ran"},
                    {"A young girl found a map", "and followed it"},
                    {"The old sailor saw a storm", "and turned the ship"},
                    {"In a dark forest a wolf waited", "for the night"},
                    {"The prince opened the door", "and saw a garden"},
                    {"A small robot woke up", "and looked around"},
                    {"The knight lost his sword", "and searched the river"}}}}});
    c.push_back({"text_generation",
                 "question_generation",
                 {{"Generate a question about this topic", "What is it ?"},
                  {"Create a question based on this text", "Why is it ?"}},
                 {{{"' {X} ' Generate a question about this topic", "' {X} ' Create a question based on this text"},
                   {{"the ocean", "How deep is the ocean ?"},
                    {"volcanoes", "Why do volcanoes erupt ?"},
                    {"the moon", "Why does the moon shine ?"},
                    {"photosynthesis", "How does photosynthesis work ?"},
                    {"the heart", "How does the heart pump ?"},
                    {"electricity", "How does electricity flow ?"},
                    {"the pyramids", "Who built the pyramids ?"},
                    {"dinosaurs", "Why did dinosaurs vanish ?"},
                    {"rainbows", "How do rainbows form ?"},
                    {"bees", "Why do bees make honey ?"}}}}});
    return c;
  }();
  return kCategories;
}

struct PromptInstance {
  std::string prompt;
  std::string answer;
};

// Held-out prompts: the last two fillers of each category's first template
// group, each in one template. These exact lines never enter the corpus.
inline std::vector<PromptInstance> heldout_instances(const CategorySpec& cat) {
  const auto& g = cat.groups.front();
  std::vector<PromptInstance> out;
  const std::size_t nf = g.fillers.size();
  const std::size_t nt = g.templates.size();
  for (std::size_t f = nf - 2; f < nf; ++f)
    out.push_back({fill(g.templates[f % nt], g.fillers[f].slot), g.fillers[f].answer});
  return out;
}

// Dataset prompts: the two reference prompts plus three template instances
// over the first fillers of the first group.
inline std::vector<std::string> dataset_prompts(const CategorySpec& cat) {
  std::vector<std::string> out;
  for (const auto& r : cat.reference_prompts) out.push_back(r.slot);
  const auto& g = cat.groups.front();
  for (std::size_t f = 0; out.size() < 5; ++f)
    out.push_back(fill(g.templates[(f + 1) % g.templates.size()], g.fillers[f + 1].slot));
  return out;
}

inline std::vector<std::string> canonical_lines() {
  std::vector<std::string> lines;
  std::set<std::string> excluded;
  for (const auto& cat : categories())
    for (const auto& h : heldout_instances(cat)) excluded.insert(h.prompt + " " + h.answer);
  auto add = [&](std::string line) {
    if (excluded.count(line) == 0) lines.push_back(std::move(line));
  };

  for (const auto& cat : categories()) {
    for (const auto& r : cat.reference_prompts) add(r.slot + " " + r.answer);
    for (const auto& g : cat.groups)
      for (const auto& t : g.templates)
        for (const auto& f : g.fillers) add(fill(t, f.slot) + " " + f.answer);
  }
  // Plain declarative facts and sequences.
  for (const auto& [country, city] : capitals()) {
    add(city + " is the capital of " + country + " .");
    add("the capital city of " + country + " is " + city + " .");
  }
  for (const auto& [en, de] : german_words()) add("in German , " + en + " is " + de + " .");
  const auto& days = weekdays();
  for (std::size_t i = 0; i < days.size(); ++i) {
    std::string seq;
    for (std::size_t k = 0; k < 4; ++k) seq += (k ? " " : "") + days[(i + k) % days.size()];
    add(seq);
  }
  const auto& ms = months();
  for (std::size_t i = 0; i < ms.size(); ++i) {
    std::string seq;
    for (std::size_t k = 0; k < 4; ++k) seq += (k ? " " : "") + ms[(i + k) % ms.size()];
    add(seq);
  }
  for (int n = 1; n <= 26; ++n)
    add(std::to_string(n) + " " + std::to_string(n + 1) + " " + std::to_string(n + 2) + " " +
        std::to_string(n + 3));
  return lines;
}

// `n_docs == 0` yields the canonical lines. Larger requests append documents
// made of two randomly chosen canonical lines, deterministic in `seed`.
inline std::vector<std::string> build_synthetic_corpus(std::uint64_t seed, std::size_t n_docs = 0) {
  std::vector<std::string> lines = canonical_lines();
  if (n_docs <= lines.size()) {
    if (n_docs != 0) lines.resize(n_docs);
    return lines;
  }
  const std::size_t base = lines.size();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, base - 1);
  while (lines.size() < n_docs) {
    const std::size_t a = pick(rng);
    const std::size_t b = pick(rng);
    lines.push_back(lines[a] + " " + lines[b]);
  }
  return lines;
}

// JSON {types: [{name, categories: [{name, prompts[5]}]}]}.
inline nlohmann::ordered_json function_dataset_json(bool heldout = false) {
  nlohmann::ordered_json types = nlohmann::ordered_json::array();
  for (const auto& cat : categories()) {
    if (types.empty() || types.back()["name"] != cat.type)
      types.push_back({{"name", cat.type}, {"categories", nlohmann::ordered_json::array()}});
    nlohmann::ordered_json prompts = nlohmann::ordered_json::array();
    if (heldout) {
      for (const auto& h : heldout_instances(cat)) prompts.push_back(h.prompt);
    } else {
      for (const auto& p : dataset_prompts(cat)) prompts.push_back(p);
    }
    types.back()["categories"].push_back({{"name", cat.name}, {"prompts", prompts}});
  }
  return {{"types", types}};
}

}  // namespace glassbox::corpus
