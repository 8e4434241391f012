# ranklab/__init__.py
