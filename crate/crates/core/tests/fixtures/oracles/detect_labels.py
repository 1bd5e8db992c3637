"""Label the library-detection snippets with Python's own tokenizer.

An import counts when an `import`/`from` NAME token opens a statement (start
of a logical line, or right after `;`). String and comment tokens are never
inspected, so imports mentioned inside them do not count.

Usage: python3 detect_labels.py snippets.json > detect_corpus.jsonl
"""
import io
import json
import sys
import tokenize

ROOTS = {
    "matplotlib": ["matplotlib", "pylab", "mpl_toolkits"],
    "seaborn": ["seaborn"],
    "plotly": ["plotly"],
    "bokeh": ["bokeh"],
    "altair": ["altair"],
}

SKIP = {tokenize.COMMENT, tokenize.NL, tokenize.INDENT, tokenize.DEDENT, tokenize.ENCODING}


def statements(source):
    toks = [t for t in tokenize.generate_tokens(io.StringIO(source).readline) if t.type not in SKIP]
    stmt, out = [], []
    for t in toks:
        if t.type in (tokenize.NEWLINE, tokenize.ENDMARKER) or (t.type == tokenize.OP and t.string == ";"):
            if stmt:
                out.append(stmt)
            stmt = []
        else:
            stmt.append(t)
    return out


def dotted(tokens, i):
    names = []
    while i < len(tokens) and tokens[i].type == tokenize.NAME:
        names.append(tokens[i].string)
        if i + 1 < len(tokens) and tokens[i + 1].string == ".":
            i += 2
        else:
            i += 1
            break
    return ".".join(names), i


def modules(stmt):
    if stmt[0].type != tokenize.NAME:
        return []
    if stmt[0].string == "import":
        mods, i = [], 1
        while i < len(stmt):
            name, i = dotted(stmt, i)
            if name:
                mods.append(name)
            while i < len(stmt) and stmt[i].string != ",":
                i += 1
            i += 1
        return mods
    if stmt[0].string == "from" and len(stmt) > 1 and stmt[1].type == tokenize.NAME:
        name, i = dotted(stmt, 1)
        if i < len(stmt) and stmt[i].string == "import":
            return [name]
    return []


def label(source):
    found = set()
    for stmt in statements(source):
        for mod in modules(stmt):
            for lib, roots in ROOTS.items():
                if any(mod == r or mod.startswith(r + ".") for r in roots):
                    found.add(lib)
    return sorted(found)


if __name__ == "__main__":
    snippets = json.load(open(sys.argv[1]))
    for i, src in enumerate(snippets):
        print(json.dumps({"id": f"s{i:02d}", "source": src, "expected": label(src)}))
