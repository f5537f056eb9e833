"""Reference apps: executable specifications of the plugin contract.

Deliberately simple, exact-arithmetic algorithms — the framework, not the
model, is the artifact under test here.
"""
