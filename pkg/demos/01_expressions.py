"""Tour of the expression toolkit.

Run:  python demos/01_expressions.py
"""

from mwpdual import expr

# Lexing an infix annotation string. Numbers become constant tokens and
# N<k> tokens are quantity slots bound to the k-th number of a problem.
text = "( N1 + N2 ) * 3.14"
tokens = expr.tokenize_infix(text)
print("infix tokens :", [t.text for t in tokens])

# The canonical machine form is prefix (operator-first) order.
prefix = expr.infix_to_prefix(tokens)
print("prefix       :", expr.prefix_to_text(prefix))

# A prefix sequence parses into a binary tree whose preorder positions
# coincide with the prefix token positions.
tree = expr.parse_prefix(prefix)
print("preorder ids :", [(n.index, n.token.text) for n in tree.nodes_preorder()])
print("leaves       :", [(i, t.text) for i, t in expr.leaves_in_order(tree)])

# Evaluation binds slot indices to values.
value = expr.evaluate(tree, {1: 3, 2: 7})
print("value        :", value, "(= (3 + 7) * 3.14)")

# Completeness of a prefix stream is a simple counting argument; the beam
# decoder uses it as its termination test.
for probe in ("* + N1 N2 N3", "* + N1 N2", ""):
    toks = expr.prefix_from_text(probe)
    ok, needed = expr.is_complete_prefix(toks)
    print(f"complete({probe!r:22}) -> {ok}, still needs {needed} operand(s)")

# Malformed inputs raise typed errors.
for bad in ("N1 + ", "( N1 + N2", "N1 @ N2"):
    try:
        expr.infix_to_prefix(expr.tokenize_infix(bad))
    except expr.ExprError as e:
        print(f"{bad!r:14} -> {type(e).__name__}: {e}")
