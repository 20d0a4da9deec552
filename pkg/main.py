from memorySite.wsgi import application

# WSGI entry point for "gunicorn main:app"
app = application
