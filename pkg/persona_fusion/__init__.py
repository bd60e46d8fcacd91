# Persona-fusion response selection package
