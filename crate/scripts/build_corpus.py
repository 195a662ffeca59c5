"""Build the bundled English test corpus from CPython's own documentation.

Sources (PSF license): the language reference topics shipped in
``pydoc_data.topics`` and docstrings of pure-Python stdlib modules.
Output: one tokenized sentence per line, punctuation split off.
"""
import ast
import pathlib
import random
import re
import sys
import sysconfig

import pydoc_data.topics

SENT_SPLIT = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")
TOKEN = re.compile(r"[A-Za-z]+(?:'[a-z]+)?|[0-9]+|[.,;:!?()\"]")


def texts():
    yield from pydoc_data.topics.topics.values()
    stdlib = pathlib.Path(sysconfig.get_paths()["stdlib"])
    for path in sorted(stdlib.glob("*.py")):
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc:
                    yield doc


def sentences():
    for text in texts():
        for para in re.split(r"\n\s*\n", text):
            if re.search(r">>>|\n\s{4,}\S|\*\*|==|->", para):
                continue
            flat = " ".join(para.split())
            for sent in SENT_SPLIT.split(flat):
                if not sent[:1].isupper() or not sent.endswith("."):
                    continue
                if re.search(r"[_=<>\[\]{}*`@#/\\|]", sent):
                    continue
                toks = TOKEN.findall(sent.lower())
                if 5 <= len(toks) <= 40 and sum(t.isalpha() for t in toks) >= 0.7 * len(toks):
                    yield " ".join(toks)


def main():
    seen, out = set(), []
    for s in sentences():
        if s not in seen:
            seen.add(s)
            out.append(s)
    random.Random(0).shuffle(out)
    limit = int(sys.argv[2]) if len(sys.argv) > 2 else 12000
    pathlib.Path(sys.argv[1]).write_text("\n".join(out[:limit]) + "\n", encoding="utf-8")
    print(f"{min(limit, len(out))} of {len(out)} sentences")


if __name__ == "__main__":
    main()
