"""Seeded synthetic corpora for desk-scale experiments.

``prose_corpus`` yields short Russian narrative sentences (the "general
language" domain the base model is pre-trained on). ``code_instructions``
yields instruction records in the shape of a Russian-language Python
instruction set: a request, then either a code answer or a short prose
discussion of the code.
"""

from __future__ import annotations

from .dataset import InstructionRecord
from .rng import SplitMix64

_SUBJ = ["модель", "студент", "преподаватель", "система", "сеть", "программа", "автор", "команда",
         "библиотека", "сервер", "пользователь", "исследователь", "учёный", "инженер", "писатель",
         "читатель", "редактор", "аналитик", "робот", "компьютер", "ученик", "учитель", "друг", "сосед",
         "врач", "водитель", "художник", "музыкант", "журналист", "архитектор"]
_VERB = ["читает", "пишет", "изучает", "обрабатывает", "видит", "строит", "проверяет", "находит",
         "меняет", "описывает", "сохраняет", "получает", "отправляет", "открывает", "закрывает",
         "переводит", "обсуждает", "готовит", "рисует", "слушает", "покупает", "ищет", "запоминает",
         "объясняет", "исправляет", "публикует", "анализирует", "любит"]
_OBJ = ["текст", "книгу", "задачу", "статью", "ответ", "вопрос", "данные", "письмо", "отчёт",
        "результат", "пример", "документ"]
_ADV = ["быстро", "медленно", "внимательно", "снова", "сегодня", "вечером", "утром", "легко",
        "долго", "тихо"]
_ADJ = ["новую", "старую", "сложную", "простую", "длинную", "короткую", "интересную", "важную",
        "красивую", "странную", "полезную", "большую", "маленькую", "скучную", "смешную", "редкую",
        "известную", "лучшую", "первую", "последнюю"]
_CONJ = ["и", "но", "потом", "поэтому", "а", "затем", "однако", "зато"]

# (instruction phrase, function name, body lines using ``xs`` and ``n``)
_TASKS = [
    ("посчитай сумму элементов списка", "total", ["result = sum(xs)"]),
    ("найди максимальный элемент списка", "largest", ["result = max(xs)"]),
    ("найди минимальный элемент списка", "smallest", ["result = min(xs)"]),
    ("отсортируй список по возрастанию", "ordered", ["result = sorted(xs)"]),
    ("переверни список", "reverse", ["result = xs[::-1]"]),
    ("посчитай длину списка", "size", ["result = len(xs)"]),
    ("удали повторы из списка", "unique", ["result = list(set(xs))"]),
    ("верни первые n элементов списка", "head", ["result = xs[:n]"]),
    ("умножь каждый элемент на n", "scale", ["result = [x * n for x in xs]"]),
    ("оставь только чётные числа", "evens", ["result = [x for x in xs if x % 2 == 0]"]),
    ("посчитай среднее значение списка", "mean", ["s = sum(xs)", "result = s / len(xs)"]),
    ("прибавь n к каждому элементу", "shift", ["result = [x + n for x in xs]"]),
]
_VERBS = ["напиши функцию которая", "создай функцию которая", "реализуй функцию которая",
          "покажи как"]
_LANG = ["на python", "на языке python", "в python"]
_ARGS = ["xs", "items", "values", "data"]
_EXPLAIN = ["функция {fn} возвращает результат для списка",
            "здесь {fn} принимает список и возвращает новый результат",
            "код {fn} работает за линейное время и не меняет список"]


def prose_sentence(rng: SplitMix64) -> str:
    def pick(xs):
        return xs[rng.randbelow(len(xs))]

    first = f"{pick(_SUBJ)} {pick(_VERB)} {pick(_ADJ)} {pick(_OBJ)} {pick(_ADV)}"
    if rng.randbelow(2):
        return f"{first} , {pick(_CONJ)} {pick(_SUBJ)} {pick(_VERB)} {pick(_OBJ)} ."
    return first + " ."


def prose_corpus(n: int, seed: int = 0) -> list[str]:
    rng = SplitMix64(seed)
    return [prose_sentence(rng) for _ in range(n)]


def code_record(rng: SplitMix64, prose_fraction: float = 0.25) -> InstructionRecord:
    def pick(xs):
        return xs[rng.randbelow(len(xs))]

    phrase, fn, body = pick(_TASKS)
    arg = pick(_ARGS)
    instruction = f"{pick(_VERBS)} {phrase} {pick(_LANG)}"
    if rng.uniform(1)[0] < prose_fraction:
        response = pick(_EXPLAIN).format(fn=fn)
    else:
        lines = [f"def {fn}({arg}, n):"] + ["    " + b.replace("xs", arg) for b in body] + ["    return result"]
        response = "```python\n" + "\n".join(lines) + "\n```"
    return InstructionRecord(instruction, response, lang="ru", source="synthetic")


def code_instructions(n: int, seed: int = 0, prose_fraction: float = 0.25) -> list[InstructionRecord]:
    rng = SplitMix64(seed)
    return [code_record(rng, prose_fraction) for _ in range(n)]
